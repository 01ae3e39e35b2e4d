"""
simple_config.py 設定測試
環境變數載入、預設值與驗證
"""

import os
from unittest.mock import patch

import pytest
from pydantic import ValidationError

from simple_config import Settings


class TestSettingsConfiguration:
    """Settings 預設值與環境變數"""

    def test_default_configuration_values(self):
        """沒有環境變數時的預設值"""
        with patch.dict(os.environ, {}, clear=True):
            settings = Settings(_env_file=None)
            assert settings.debug is False
            assert settings.log_level == "INFO"
            assert settings.log_json is True
            assert settings.default_threads == 1
            assert settings.default_output_dir == "results"

    def test_environment_variable_loading(self):
        """MSSFS_ 前綴的環境變數覆蓋預設值"""
        test_env = {
            "MSSFS_DEBUG": "true",
            "MSSFS_LOG_LEVEL": "DEBUG",
            "MSSFS_LOG_JSON": "false",
            "MSSFS_DEFAULT_THREADS": "4",
            "MSSFS_DEFAULT_OUTPUT_DIR": "/tmp/out",
        }
        with patch.dict(os.environ, test_env, clear=True):
            settings = Settings(_env_file=None)
            assert settings.debug is True
            assert settings.log_level == "DEBUG"
            assert settings.log_json is False
            assert settings.default_threads == 4
            assert settings.default_output_dir == "/tmp/out"

    def test_case_insensitive(self):
        with patch.dict(os.environ, {"mssfs_default_threads": "3"}, clear=True):
            assert Settings(_env_file=None).default_threads == 3

    def test_unprefixed_variables_are_ignored(self):
        with patch.dict(os.environ, {"DEBUG": "true", "DEFAULT_THREADS": "8"}, clear=True):
            settings = Settings(_env_file=None)
            assert settings.debug is False
            assert settings.default_threads == 1

    @pytest.mark.parametrize("value", ["0", "-2", "many"])
    def test_invalid_threads(self, value):
        with patch.dict(os.environ, {"MSSFS_DEFAULT_THREADS": value}, clear=True):
            with pytest.raises(ValidationError):
                Settings(_env_file=None)

    def test_env_file(self, tmp_path):
        """.env 檔案中的設定"""
        env_file = tmp_path / ".env"
        env_file.write_text("MSSFS_LOG_LEVEL=WARNING\nMSSFS_DEBUG=1\n", encoding="utf-8")
        with patch.dict(os.environ, {}, clear=True):
            settings = Settings(_env_file=str(env_file))
            assert settings.log_level == "WARNING"
            assert settings.debug is True
