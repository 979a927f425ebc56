import logging
import sys

import termcolor as tc


class RelativeSeconds(logging.Formatter):
    def format(self, record):
        record.relativeCreated = f"{record.relativeCreated / 1000:.4f}s"
        return super().format(record)


class ColoredFormatter(RelativeSeconds):
    def color(self, level: str, content: str):
        match level:
            case "DEBUG":
                color = "blue"
            case "INFO":
                color = "green"
            case "WARNING":
                color = "yellow"
            case "ERROR" | "CRITICAL":
                color = "red"
            case _:
                color = "white"
        return tc.colored(content, color=color, attrs=["bold"])

    def format(self, record):
        # copy so that other handlers see the uncoloured level name
        record = logging.makeLogRecord(record.__dict__)
        record.levelname = self.color(record.levelname, record.levelname)
        return super().format(record)


class _BelowError(logging.Filter):
    def filter(self, record):
        return record.levelno < logging.ERROR


def init_logger(log_level=logging.INFO):
    """Routine records go to stdout, errors to stderr."""
    formatter = ColoredFormatter("[%(levelname)s t=%(relativeCreated)s] %(message)s")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)

    out = logging.StreamHandler(sys.stdout)
    out.addFilter(_BelowError())
    out.setFormatter(formatter)
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.ERROR)
    err.setFormatter(formatter)

    root.addHandler(out)
    root.addHandler(err)
    root.setLevel(log_level)


def mat_to_str(mat: list[list], rjust: list[bool] = None) -> str:
    if not mat:
        logging.warning("Empty matrix")
        return ""

    mat = [[str(cell) for cell in row] for row in mat]
    width = max(len(row) for row in mat)
    mat = [row + [""] * (width - len(row)) for row in mat]
    max_lengths = [max(len(row[i]) + 2 for row in mat) for i in range(width)]

    ret = []
    for row in mat:
        row_ret = []
        for i, cell in enumerate(row):
            if cell.startswith("*"):
                cell = "-" * (max_lengths[i] - 1)
            if rjust is not None and rjust[i]:
                row_ret.append(cell.rjust(max_lengths[i]))
            else:
                row_ret.append(cell.ljust(max_lengths[i]))
        ret.append(" ".join(row_ret))
    return "\n".join(ret)
