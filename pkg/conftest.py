# conftest.py
# Makes 'backend' and 'adaptive_filters' importable when pytest runs from the repository root.
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))
