"""執行時間監控工具"""

import time
from functools import wraps
from typing import Any, Callable, TypeVar

import structlog

logger = structlog.get_logger()

F = TypeVar("F", bound=Callable[..., Any])


def with_timing(func: F) -> F:
    """執行時間監控裝飾器"""

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        start_time = time.perf_counter()
        try:
            result = func(*args, **kwargs)
            execution_time = time.perf_counter() - start_time
            logger.info(f"{func.__name__} completed", execution_time=f"{execution_time:.2f}s")
            return result
        except Exception as e:
            execution_time = time.perf_counter() - start_time
            logger.error(
                f"{func.__name__} failed",
                execution_time=f"{execution_time:.2f}s",
                error=str(e),
            )
            raise

    return wrapper  # type: ignore[return-value]


class Stopwatch:
    """累計各階段的實際耗時，寫入執行紀錄"""

    def __init__(self) -> None:
        self.timings: dict = {}

    def measure(self, name: str) -> "_Lap":
        return _Lap(self, name)


class _Lap:
    def __init__(self, owner: Stopwatch, name: str) -> None:
        self.owner = owner
        self.name = name
        self.start = 0.0

    def __enter__(self) -> "_Lap":
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc: Any) -> None:
        elapsed = time.perf_counter() - self.start
        self.owner.timings[self.name] = self.owner.timings.get(self.name, 0.0) + elapsed
