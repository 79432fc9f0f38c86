"""python -m ssmlab"""
import sys

from dotenv import load_dotenv

from ssmlab.cli import run

load_dotenv()

sys.exit(run())
