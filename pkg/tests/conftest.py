import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from helpers import *  # noqa: F401,F403
