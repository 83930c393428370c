import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


class Config:
    """Unified configuration class with validation"""

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'WARNING')

    # Memory planner (chunk size and scale factor of the sequence-length-aware allocator)
    DEFAULT_CHUNK_SIZE = int(os.getenv('DEFAULT_CHUNK_SIZE', str(2 * 1024 * 1024)))  # 2MB
    K_SCALE = float(os.getenv('K_SCALE', '1.2'))
    ALIGNMENT = int(os.getenv('ALIGNMENT', '32'))
    IDLE_RELEASE_LIMIT = int(os.getenv('IDLE_RELEASE_LIMIT', '0'))  # 0 = release immediately
    CACHING_BIN_MIN = int(os.getenv('CACHING_BIN_MIN', '512'))

    # Batch scheduler / trigger policy
    MAX_BATCH = int(os.getenv('MAX_BATCH', '20'))
    LAZY_TIMEOUT = float(os.getenv('LAZY_TIMEOUT', '0.01'))  # seconds
    LATENCY_CONSTRAINT = float(os.getenv('LATENCY_CONSTRAINT', '0.1'))  # seconds

    # Simulation
    DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', '0'))
    CRITICAL_THROUGHPUT_RATIO = float(os.getenv('CRITICAL_THROUGHPUT_RATIO', '0.98'))
    DIVERGENCE_SLOPE_RATIO = float(os.getenv('DIVERGENCE_SLOPE_RATIO', '0.02'))

    # SQLite cost store
    COST_DB_PATH = os.getenv('COST_DB_PATH', os.path.join(Path(__file__).parent, 'data', 'cost_tables.db'))

    @classmethod
    def validate(cls):
        """Validate configuration"""
        errors = []

        if cls.DEFAULT_CHUNK_SIZE <= 0:
            errors.append("DEFAULT_CHUNK_SIZE must be positive")

        if cls.K_SCALE < 1:
            errors.append("K_SCALE must be >= 1")

        if cls.ALIGNMENT < 1:
            errors.append("ALIGNMENT must be >= 1")

        if cls.IDLE_RELEASE_LIMIT < 0:
            errors.append("IDLE_RELEASE_LIMIT must be >= 0")

        if cls.MAX_BATCH < 1:
            errors.append("MAX_BATCH must be >= 1")

        if cls.LAZY_TIMEOUT <= 0:
            errors.append("LAZY_TIMEOUT must be positive")

        if cls.LATENCY_CONSTRAINT <= 0:
            errors.append("LATENCY_CONSTRAINT must be positive")

        if not 0 < cls.CRITICAL_THROUGHPUT_RATIO <= 1:
            errors.append("CRITICAL_THROUGHPUT_RATIO must be in (0, 1]")

        if errors:
            raise ValueError("Configuration errors: " + ", ".join(errors))

        return True
