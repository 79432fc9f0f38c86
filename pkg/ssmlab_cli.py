"""
Entry script for the ssmlab command line.
"""
import sys

from dotenv import load_dotenv

load_dotenv()

from ssmlab.cli import run  # noqa: E402

if __name__ == '__main__':
    sys.exit(run())
