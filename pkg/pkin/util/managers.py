import logging
import time
from typing import Optional

import termcolor as tc


class LoggerManager:
    """Temporarily sets the root log level, e.g. to silence inner solves."""

    def __init__(self, log_level):
        self._log_level = log_level

    def __enter__(self):
        self._current_level = logging.getLogger().getEffectiveLevel()
        logging.getLogger().setLevel(self._log_level)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        logging.getLogger().setLevel(self._current_level)


class TimerContextManager:
    def __init__(self, description: Optional[str] = None, end: bool = True, for_debug: bool = False):
        self.description = description
        self.end = end
        self.debug = for_debug
        self.start_time = None

    def log(self, msg):
        if self.description is None:
            return
        if self.debug:
            logging.debug(msg)
        else:
            logging.info(msg)

    def __enter__(self):
        self.log(tc.colored(f"Started {self.description}...", "magenta"))
        self.start_time = time.time()
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if exc_type is not None:
            self.log(tc.colored(f"Aborted {self.description} after {self.get_time():.3f}s", "red"))
            return
        if not self.description or not self.end:
            return
        self.log(tc.colored(f"Finished {self.description} in {self.get_time():.3f}s", "green"))

    def get_time(self) -> float:
        return time.time() - self.start_time
