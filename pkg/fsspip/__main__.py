#!/usr/bin/env python3
"""
CLIのエントリーポイント
python -m fsspip で実行可能
"""

from .main import main

if __name__ == "__main__":
    main()
