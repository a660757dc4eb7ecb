"""
Acoustic Array Calibration - Main Entry Point
Runs one calibration stage (or the whole pipeline) from the command line
"""

import sys
import os

# Add src to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.pipeline.cli import main

if __name__ == "__main__":
    sys.exit(main())
