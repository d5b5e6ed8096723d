import itertools
import re
import sys
import threading
import time
from numbers import Number

from MISPar.exceptions import InputError

_hms = re.compile(r'^\s*(\d+):([0-5]\d):([0-5]\d)\s*$')


def parse_hms(text):
    """Convert an elapsed time 'H:MM:SS' to integer seconds

    Hours may exceed 24, e.g. '44:18:02' -> 159482.

    :param text: elapsed time string
    :type text: str
    :return: seconds
    :rtype: int
    """
    match = _hms.match(str(text))
    if match is None:
        raise InputError('parse_hms', f'not an H:MM:SS duration: {text!r}')
    hours, minutes, seconds = (int(g) for g in match.groups())
    return hours * 3600 + minutes * 60 + seconds


def format_hms(seconds):
    """Inverse of parse_hms for whole seconds, e.g. 27672 -> '7:41:12'"""
    seconds = int(round(seconds))
    if seconds < 0:
        raise InputError('format_hms', f'negative duration {seconds}')
    hours, rest = divmod(seconds, 3600)
    minutes, secs = divmod(rest, 60)
    return f'{hours}:{minutes:02d}:{secs:02d}'


class Spinner:
    """Console spinner shown on stderr while a long computation runs

    Does nothing when stderr is not a terminal, so redirected output stays clean.
    """
    busy = False
    delay = 0.2

    def __init__(self, delay=None, stream=None):
        self.spinner_generator = itertools.cycle('-/|\\')
        self.stream = stream if stream is not None else sys.stderr
        if delay and isinstance(delay, Number):
            self.delay = delay
        self.thread = None

    def spinner_task(self):
        while self.busy:
            self.stream.write(next(self.spinner_generator))
            self.stream.flush()
            time.sleep(self.delay)
            self.stream.write('\b')
            self.stream.flush()

    def __enter__(self):
        if hasattr(self.stream, 'isatty') and self.stream.isatty():
            self.busy = True
            self.thread = threading.Thread(target=self.spinner_task, daemon=True)
            self.thread.start()
        return self

    def __exit__(self, exception, value, tb):
        if self.busy:
            self.busy = False
            self.thread.join()
        if exception is not None:
            return False
