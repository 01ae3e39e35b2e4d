#!/usr/bin/env python3
"""
MSSFS - 主啟動文件
多程序狀態空間模型（含回饋與切換）的命令列工具：模擬、EM 估計、
濾波、平滑、一步預測、bootstrap 信賴區間與效能測試
"""

import os
import sys

# 添加項目根目錄到 Python 路徑
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from simple_config import settings  # noqa: E402
from src.mssfs.core.utils.log_setup import configure_logging  # noqa: E402

# 設置日誌
configure_logging(debug=settings.debug, level=settings.log_level, json_output=settings.log_json)

from src.mssfs.api.cli.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
