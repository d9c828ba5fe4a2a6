from typing import Optional


class FedSRCVaRError(Exception):
    """Root of all errors raised by fedsrcvar"""


class ParameterError(FedSRCVaRError, ValueError):
    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class DomainError(FedSRCVaRError, ValueError):
    """Loss or threshold outside [0, B]"""


class DataError(FedSRCVaRError, ValueError):
    pass


class UnsupportedError(FedSRCVaRError):
    pass


class InfeasibleError(FedSRCVaRError, ValueError):
    pass


class ProtocolError(FedSRCVaRError):
    pass


class CsvError(DataError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class PartitionError(FedSRCVaRError):
    def __init__(self, message: str, client_id: Optional[int] = None):
        if client_id is not None:
            message = f"client {client_id}: {message}"
        super().__init__(message)
        self.client_id = client_id


class ConfigError(FedSRCVaRError):
    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class NumericalError(FedSRCVaRError):
    def __init__(self, message: str, round: int):
        super().__init__(f"round {round}: {message}")
        self.round = round
