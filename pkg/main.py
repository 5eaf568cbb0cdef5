import sys
from dotenv import load_dotenv
load_dotenv()

from pysaan.cli import dispatch


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
