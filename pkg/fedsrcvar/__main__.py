import sys


if __name__ == "__main__":
    from .fedsrcvar import main

    sys.exit(main())
