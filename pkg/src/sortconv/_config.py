"""Process-wide runtime switches: deterministic mode and worker count."""
import contextlib
import os

_state = {"deterministic": False, "grad_enabled": True}


def set_deterministic(flag=True):
    _state["deterministic"] = bool(flag)


def is_deterministic():
    return _state["deterministic"]


@contextlib.contextmanager
def deterministic(flag=True):
    old = _state["deterministic"]
    _state["deterministic"] = bool(flag)
    try:
        yield
    finally:
        _state["deterministic"] = old


def is_grad_enabled():
    return _state["grad_enabled"]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def worker_count(default=None):
    """Number of evaluation workers; 1 whenever deterministic mode is on.

    ``SORTCONV_THREADS`` overrides the default of ``os.cpu_count()``.
    """
    if is_deterministic():
        return 1
    env = os.environ.get("SORTCONV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    if default is not None:
        return max(1, int(default))
    return os.cpu_count() or 1
