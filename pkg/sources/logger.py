import os
import logging

LOG_FORMAT = '%(asctime)s %(levelname)-7s [%(component)s] %(message)s'


class Logger:
    """
    File logger, one file per component under $RPE2D_LOG_DIR (default .logs).
    Records carry the component name without its .log suffix, and the level
    threshold comes from $RPE2D_LOG_LEVEL (default DEBUG).
    Consecutive duplicate messages are written only once.
    """
    def __init__(self, log_filename: str):
        self.folder = os.getenv('RPE2D_LOG_DIR', '.logs')
        self.component = os.path.splitext(log_filename)[0]
        self.enabled = self.create_folder(self.folder)
        self.log_path = os.path.join(self.folder, log_filename)
        self.logger = None
        self.last_log_msg = ""
        if self.enabled:
            self.create_logging()

    def create_logging(self) -> None:
        self.logger = logging.getLogger(f"rpe2d.{self.component}")
        self.logger.setLevel(os.getenv('RPE2D_LOG_LEVEL', 'DEBUG').upper())
        self.logger.handlers.clear()
        self.logger.propagate = False
        file_handler = logging.FileHandler(self.log_path)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.addFilter(self.tag_component)
        self.logger.addHandler(file_handler)

    def tag_component(self, record: logging.LogRecord) -> bool:
        record.component = self.component
        return True

    def create_folder(self, path: str) -> bool:
        """Create log dir"""
        try:
            os.makedirs(path, exist_ok=True)
            return True
        except OSError:
            return False

    def log(self, message: str, level: int = logging.INFO) -> None:
        if self.last_log_msg == message:
            return
        if self.enabled:
            self.last_log_msg = message
            self.logger.log(level, message)

    def debug(self, message: str) -> None:
        self.log(message, level=logging.DEBUG)

    def info(self, message: str) -> None:
        self.log(message)

    def error(self, message: str) -> None:
        self.log(message, level=logging.ERROR)

    def warning(self, message: str) -> None:
        self.log(message, level=logging.WARNING)
