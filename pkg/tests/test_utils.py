from fedsrcvar import utils


def test_format_float():
    assert utils.format_float(0.1) == "0.1"
    assert utils.format_float(1.0) == "1"
    assert utils.format_float(0.01) == "0.01"


def test_atomic_move_replaces(tmp_path):
    source = tmp_path / "stage"
    source.mkdir()
    (source / "model.bin").write_bytes(b"new")
    destination = tmp_path / "runs" / "run"
    destination.mkdir(parents=True)
    (destination / "old.txt").write_text("old")
    utils.atomic_move(source, destination)
    assert not source.exists()
    assert (destination / "model.bin").read_bytes() == b"new"
    assert not (destination / "old.txt").exists()


def test_remove_dir(tmp_path):
    target = tmp_path / "gone"
    target.mkdir()
    (target / "f").write_text("x")
    utils.remove_dir(target)
    assert not target.exists()
    utils.remove_dir(target)


def test_git_describe_is_a_string():
    assert isinstance(utils.git_describe(), str)
    assert utils.git_describe()
