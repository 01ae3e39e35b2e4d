from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """應用程式設定（只影響日誌與 CLI 預設值，不影響任何數值結果）"""
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="MSSFS_",
        case_sensitive=False
    )

    # Logging
    debug: bool = Field(default=False, description="使用 ConsoleRenderer 並輸出詳細錯誤")
    log_level: str = Field(default="INFO", description="stdlib logging 等級")
    log_json: bool = Field(default=True, description="以 JSON 輸出日誌")

    # CLI defaults
    default_threads: int = Field(default=1, ge=1, description="未指定 --threads 時的平行工作數")
    default_output_dir: str = Field(default="results", description="未指定 --out 時的輸出目錄")


# 全域設定實例
settings = Settings()
