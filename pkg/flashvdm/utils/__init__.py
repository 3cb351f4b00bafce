from typing import Dict, Optional, TextIO
from os import getenv
import sys
import logging


class LogManager:
    """
    Logging Manager. Wraps logging routines and configuration,
    holds all loggers in a dict for easy access

    Every module of the package asks for its logger here, so the
    decoders, the benchmark harness and the training loops share
    one configuration. Can attach a file handler (when a log file
    is configured) and stream the root logger to the terminal
    """

    LEVEL = getenv("FLASHVDM_LOG_LEVEL", "INFO")
    DATE_FORMATTING: str = "%D # %H:%M:%S"
    FILE_FORMATTING: str = (
        "[%(asctime)s]::[%(levelname)s]::[%(name)s]::%(message)s"
    )
    STREAM_FORMATTING: str = (
        "[%(asctime)s]::[%(levelname)s]::[%(name)s] - %(message)s"
    )

    def __init__(self, base_file: Optional[str] = None) -> None:
        self.logfile = base_file
        self._loggers: Dict[str, logging.Logger] = {}
        self._streaming = False
        self.root = logging.getLogger()
        self.root.setLevel(getattr(logging, self.LEVEL.upper()))

    def get_logger(
        self,
        name: Optional[str],
        file: Optional[str] = None,
        level: Optional[str] = None,
    ) -> logging.Logger:
        """
        Return a logger instance

        :param name - logger name, str (optional). If None, root logger
        will be returned
        :param file - File path to write logs to (optional), falls back
        to the manager's base file; no file handler when both are unset
        :param level - level name (optional), defaults to `FLASHVDM_LOG_LEVEL`

        :rtype logging.Logger. logger instance
        """
        level = self.LEVEL if level is None else level
        if name is None:
            return self.root
        if name not in self._loggers:
            self.__make_logger(name, file, level)
        return self._loggers[name]

    def __make_logger(
        self, name: str, file: Optional[str], level: str
    ) -> None:
        # create new logger instance and store in loggers,
        # set the specified logging level and add
        # file handler if there is somewhere to write to
        log = logging.getLogger(name=name)
        log.setLevel(getattr(logging, level.upper()))

        logfile = file if file else self.logfile
        if logfile:
            self.root.debug(msg=f"Adding handler for {name} for {logfile}")
            handler = logging.FileHandler(filename=logfile, encoding="utf-8")
            handler.setFormatter(
                logging.Formatter(self.FILE_FORMATTING, self.DATE_FORMATTING)
            )
            log.addHandler(handler)

        self._loggers[name] = log

    def set_level(self, level: str) -> None:
        """
        Change the level of the root logger and of every logger
        created so far

        :param level: str - level name, e.g. "DEBUG"

        :rtype None
        """
        numeric = getattr(logging, level.upper())
        self.root.setLevel(numeric)
        for log in self._loggers.values():
            log.setLevel(numeric)

    def stream_logs(self, stream: TextIO = sys.stdout) -> None:
        """
        Adds StreamHandler to the root logger (only once)

        :param stream: TextIO - stream to bind to the logger

        :rtype None
        """
        if self._streaming:
            return
        formatter = logging.Formatter(
            self.STREAM_FORMATTING, self.DATE_FORMATTING
        )
        handler = logging.StreamHandler(stream=stream)
        handler.setFormatter(formatter)
        self.root.addHandler(handler)
        self._streaming = True


LOG_MANAGER = LogManager(base_file=getenv("FLASHVDM_LOG_FILE"))
