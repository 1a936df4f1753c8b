import os


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() in ('1', 'true', 'yes', 'on')


class Config:
    # Worker processes used for ablation cells
    WORKERS = int(os.getenv('M2FORMER_WORKERS', 1))
    # Raise on NaN/Inf produced by any tensor op
    CHECK_FINITE = _flag('M2FORMER_CHECK_FINITE', 'true')
    # INFO-level training log interval (steps)
    LOG_EVERY = int(os.getenv('M2FORMER_LOG_EVERY', 50))
