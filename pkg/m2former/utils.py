"""
Utility functions and classes.
"""
import sys
import time
import logging
import logging.config
from pathlib import Path
from typing import Union
import numpy as np
from ruamel.yaml import YAML
from m2former.constants import DEFAULT_LOGGING_CONFIG_PATH

DEFAULT_STAGE = 'idle'


class StageAdapter(logging.LoggerAdapter):
    """ Logger adapter that tags every record with the stage of the running component. """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stage = DEFAULT_STAGE

    @property
    def name(self):
        return self.logger.name

    def process(self, msg, kwargs):
        # Add stage context
        kwargs.setdefault('extra', {})['stage'] = self.stage
        return msg, kwargs

    def register_stage(self, stage: str = None):
        """
        Set the stage string attached to subsequent records. None resets to the default.

        :param stage: Short context string, e.g. "train step 12"
        """
        self.stage = DEFAULT_STAGE if stage is None else stage


logger = StageAdapter(logging.getLogger('m2former'), {})


class StageFilter(logging.Filter):
    """ Fill in the stage field for records that bypass the adapter. """

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, 'stage'):
            record.stage = DEFAULT_STAGE
        return True


class UTCFormatter(logging.Formatter):
    """ Logging formatter that converts timestamps to UTC+0. """

    converter = time.gmtime


def make_rng(seed: int) -> np.random.Generator:
    """
    Return a PCG64 generator. All randomness in the package goes through this function.

    :param seed: Non-negative integer seed
    :return: numpy Generator
    """
    return np.random.Generator(np.random.PCG64(seed))


def get_logging_config(path: Union[Path, str] = None) -> dict:
    """
    Return logging configuration dictionary. If path is None, default configuration path is used.

    :param path: Logging configuration file path. If None, default configuration path is returned.
    :return: Logging configuration in a dictionary
    """
    if path is None:
        path = DEFAULT_LOGGING_CONFIG_PATH
    with open(path) as stream:
        return YAML(typ='safe').load(stream)


def configure_logging(log_level: str = 'INFO'):
    d = get_logging_config()
    logging.config.dictConfig(d)
    logger.setLevel(log_level)


def default_excepthook(exctype: type, value: BaseException, tb):
    """ Log an unhandled exception with the stage it happened in, then defer to the default hook. """
    logger.error(
        f'Unhandled {exctype.__name__} in stage "{logger.stage}": {value}', exc_info=(exctype, value, tb)
    )
    sys.__excepthook__(exctype, value, tb)


def attach_excepthook(excepthook=None):
    sys.excepthook = default_excepthook if excepthook is None else excepthook
