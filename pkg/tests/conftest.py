import sys
from pathlib import Path

# Make tests/ importable (fd.py oracle helpers) regardless of invocation dir.
sys.path.insert(0, str(Path(__file__).parent))
