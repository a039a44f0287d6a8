import json
import logging

# Attributes every LogRecord carries; anything else came in through `extra=`.
_RESERVED = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}

HUMAN_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class JsonLineFormatter(logging.Formatter):
    """One JSON object per line, with `extra` fields inlined."""

    def format(self, record):
        payload = {
            "time": self.formatTime(record, DATE_FORMAT),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, sort_keys=True)


def configure_logging(json_lines=False, level=logging.INFO, log_file=None):
    """Console in the human format (or JSON lines); a log file always gets JSON lines."""
    console = logging.StreamHandler()
    console.setFormatter(JsonLineFormatter() if json_lines else logging.Formatter(HUMAN_FORMAT, datefmt=DATE_FORMAT))
    logger.handlers.clear()
    logger.addHandler(console)
    if log_file:
        file_handler = logging.FileHandler(log_file, mode="w")
        file_handler.setFormatter(JsonLineFormatter())
        logger.addHandler(file_handler)
    logger.setLevel(level)
    logger.propagate = False
    return logger


logging.basicConfig(level=logging.INFO, format=HUMAN_FORMAT, datefmt=DATE_FORMAT)
logger = logging.getLogger("depthfusion")
