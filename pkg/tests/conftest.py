import sys
from pathlib import Path

# Oracle helpers live next to the tests, outside the package.
sys.path.insert(0, str(Path(__file__).parent))
