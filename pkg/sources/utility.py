import platform
from functools import wraps
from time import perf_counter

import colorama
from termcolor import colored

colorama.just_fix_windows_console()


def get_color_map() -> dict:
    color_map = {
        "success": "green",
        "failure": "red",
        "status": "light_green",
        "warning": "yellow",
        "output": "cyan",
        "info": "cyan"
    }
    if platform.system().lower() == "windows":
        color_map["info"] = "black"
    return color_map


def pretty_print(text, color="info", no_newline=False):
    """
    Print text in one of the status colors.

    Args:
        text (str): The text to print
        color (str, optional): success, failure, status, warning, output or info.
            Unknown names fall back to info.
    """
    color_map = get_color_map()
    if color not in color_map:
        color = "info"
    print(colored(text, color_map[color]), end='' if no_newline else "\n")


def format_duration(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.2f}s"
    minutes, seconds = divmod(seconds, 60)
    if minutes < 60:
        return f"{int(minutes)}m{seconds:04.1f}s"
    hours, minutes = divmod(minutes, 60)
    return f"{int(hours)}h{int(minutes):02d}m"


def timer_decorator(func):
    """Report the wall time of a long playbook step (sweep, ablation)."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = perf_counter()
        result = func(*args, **kwargs)
        pretty_print(f"{func.__name__} took {format_duration(perf_counter() - start_time)}", "status")
        return result
    return wrapper
