"""Driver for one generated program.

usage: harness.py PROGRAM VALUES

Loads the value list, calls run(value_list) and prints one JSON line
{"number": <float or "NaN">, "scale": <str>} to stdout. Failures exit with
65 (syntax), 66 (runtime) or 67 (protocol) and a message on stderr.
"""
import json
import math
import numbers
import os
import sys

EXIT_SYNTAX = 65
EXIT_RUNTIME = 66
EXIT_PROTOCOL = 67

BLOCKED_PREFIXES = (
    "socket.", "subprocess.", "os.fork", "os.forkpty", "os.system", "os.exec",
    "os.posix_spawn", "os.spawn", "os.kill", "os.killpg", "os.remove", "os.rename",
    "os.rmdir", "os.mkdir", "os.symlink", "os.link", "os.chmod", "os.chown",
    "os.truncate", "os.unlink", "os.utime", "os.putenv", "os.unsetenv", "os.chdir",
    "shutil.", "ctypes.", "pty.", "fcntl.", "resource.setrlimit", "sys.setprofile",
    "sys.settrace", "sys.addaudithook", "urllib.", "http.", "ftplib.", "smtplib.",
    "webbrowser.", "sqlite3.", "mmap.",
)
BLOCKED_MODULES = {
    "socket", "_socket", "subprocess", "_posixsubprocess", "multiprocessing",
    "ctypes", "_ctypes", "asyncio", "ssl", "_ssl", "pty",
}
WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_CREAT | os.O_TRUNC | os.O_APPEND


def _audit(event, args):
    if event == "open":
        mode = args[1] if len(args) > 1 else None
        flags = args[2] if len(args) > 2 else 0
        writing = isinstance(mode, str) and any(c in mode for c in "wax+")
        if writing or (isinstance(flags, int) and flags & WRITE_FLAGS):
            raise PermissionError("sandbox: file writes are not permitted")
        return
    if event == "import":
        root = str(args[0]).split(".")[0]
        if root in BLOCKED_MODULES:
            raise ImportError("sandbox: module %r is not available" % args[0])
        return
    if event.startswith(BLOCKED_PREFIXES):
        raise PermissionError("sandbox: %s is not permitted" % event)


def _fail(code, message):
    sys.stderr.write(message.rstrip() + "\n")
    sys.stderr.flush()
    os._exit(code)


def _render_number(x):
    if isinstance(x, bool) or not isinstance(x, numbers.Real):
        return None
    if isinstance(x, numbers.Integral):
        return str(int(x))
    try:
        f = float(x)
    except (OverflowError, ValueError):
        return '"NaN"'
    if math.isnan(f) or math.isinf(f):
        return '"NaN"'
    return repr(f)


def main():
    program_path, values_path = sys.argv[1], sys.argv[2]
    with open(program_path, encoding="utf-8") as fh:
        source = fh.read()
    with open(values_path, encoding="utf-8") as fh:
        value_list = json.load(fh)
    out = sys.stdout
    sys.stdout = sys.stderr
    sys.addaudithook(_audit)

    try:
        code = compile(source, "<program>", "exec")
    except (SyntaxError, ValueError) as exc:
        _fail(EXIT_SYNTAX, "%s: %s" % (type(exc).__name__, exc))

    namespace = {"__name__": "__program__"}
    try:
        exec(code, namespace)
        run = namespace.get("run")
        if not callable(run):
            _fail(EXIT_RUNTIME, "NameError: no callable 'run' defined")
        result = run(value_list)
    except BaseException as exc:  # noqa: BLE001 - the program's failure is the outcome
        _fail(EXIT_RUNTIME, "%s: %s" % (type(exc).__name__, exc))

    if not isinstance(result, tuple) or len(result) != 2:
        _fail(EXIT_PROTOCOL, "run() must return a 2-tuple, got %s" % type(result).__name__)
    number, scale = result
    rendered = _render_number(number)
    if rendered is None:
        _fail(EXIT_PROTOCOL, "first element is not a number: %s" % type(number).__name__)
    if scale is None:
        scale = ""
    if not isinstance(scale, str):
        _fail(EXIT_PROTOCOL, "scale is not a string: %s" % type(scale).__name__)
    out.write('{"number": %s, "scale": %s}\n' % (rendered, json.dumps(scale)))
    out.flush()
    os._exit(0)


if __name__ == "__main__":
    main()
