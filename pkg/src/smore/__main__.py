from .interface.cli import run


def main() -> None:
    """Entry point for the smore command line"""
    raise SystemExit(run())


if __name__ == "__main__":
    main()
