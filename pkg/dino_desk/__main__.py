"""The entry point for the script."""

from dino_desk.dino_desk import main

if __name__ == "__main__":
    raise SystemExit(main())
