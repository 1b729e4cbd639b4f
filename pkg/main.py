from app.cli import main
import sys

if __name__ == "__main__":
    # Commands validate configuration themselves (init_config) before running
    sys.exit(main())
