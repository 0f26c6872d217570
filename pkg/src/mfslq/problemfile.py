"""Problem files (TOML).

Grammar::

    name = "CP-J1"              # optional
    n = 1                       # state dimension
    m = 1                       # control dimension
    T = 1.0
    n_steps = 1000
    x0 = [1.0]
    delta = 0.5                 # optional, R(t) >= delta I (default: half the smallest eigenvalue of R)
    coefficient_mode = "deterministic"   # or "path-dependent"

    [[marks]]                   # one table per mark, in order
    label = "up"
    intensity = 2.0

    [coefficients]
    B = [[1.0]]                 # constant matrix, row-major lists
    beta = [[[0.5]]]            # per-mark coefficients: one matrix per mark

    [coefficients.Q]            # time table, piecewise constant from each time
    times = [0.0, 0.5]
    values = [[[1.0]], [[2.0]]]

    [coefficients.A]            # any coefficient may add a slope in W(t)
    value = [[0.0]]             # (path-dependent mode only)
    w_slope = [[0.1]]

Missing coefficients are zero. A scalar is accepted for a 1x1 matrix.
Names: A A1 B B1 C C1 D D1 Q Q1 R R1 G and the per-mark alpha alpha1 beta beta1.
"""
from __future__ import annotations

import hashlib
import re
from importlib import resources

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from .errors import InputError, MFSLQError, ProblemFileError
from .model import PER_MARK, PLAIN, Coefficient, CoefficientSet, JumpModel, ProblemSpec, TimeGrid

TOP_KEYS = {"name", "n", "m", "T", "n_steps", "x0", "delta", "coefficient_mode", "marks", "coefficients"}
COEF_NAMES = set(PLAIN) | {"G"} | set(PER_MARK)
SHIPPED = {"cp_lq1": "cp_lq1.toml", "cp_j1": "cp_j1.toml", "mf1": "mf1.toml"}


def _locate(text, key, section=None):
    """Best-effort (line, col) of ``key`` in the source text."""
    pats = []
    if section:
        pats.append(rf"^\s*\[\[?\s*{re.escape(section)}\.{re.escape(key)}\s*\]")
    pats += [rf"^\s*{re.escape(key)}\s*="]
    for pat in pats:
        for i, line in enumerate(text.splitlines(), 1):
            if re.search(pat, line):
                return i, len(line) - len(line.lstrip()) + 1
    return None, None


def _fail(text, msg, key=None, section=None, **ctx):
    line, col = _locate(text, key, section) if key else (None, None)
    return ProblemFileError(msg, line=line, col=col, **ctx)


def _matrix(text, name, val, where=None):
    try:
        a = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise _fail(text, f"coefficient {name}: entries must be numbers", name, "coefficients")
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim == 1:
        raise _fail(text, f"coefficient {name}: a matrix is a list of rows, e.g. [[1.0, 0.0]]", name, "coefficients")
    if a.ndim != 2:
        raise _fail(text, f"coefficient {name}: expected a matrix, found a {a.ndim}-d array", name, "coefficients")
    return a


def _coefficient(text, name, val):
    if isinstance(val, dict):
        extra = set(val) - {"value", "times", "values", "w_slope"}
        if extra:
            raise _fail(text, f"coefficient {name}: unknown keys {sorted(extra)}", name, "coefficients")
        if "times" in val or "values" in val:
            if "times" not in val or "values" not in val:
                raise _fail(text, f"coefficient {name}: a time table needs both 'times' and 'values'", name,
                            "coefficients")
            mats = [_matrix(text, name, v) for v in val["values"]]
            try:
                c = Coefficient.table(val["times"], mats)
            except (InputError, ValueError) as e:
                raise _fail(text, f"coefficient {name}: {e}", name, "coefficients")
        elif "value" in val:
            c = Coefficient.constant(_matrix(text, name, val["value"]))
        else:
            raise _fail(text, f"coefficient {name}: give 'value' or 'times'/'values'", name, "coefficients")
        if "w_slope" in val:
            c = c.with_slope(_matrix(text, name, val["w_slope"]))
        return c
    return Coefficient.constant(_matrix(text, name, val))


def _int(text, doc, key, minimum=1):
    v = doc.get(key)
    if v is None:
        raise ProblemFileError(f"missing required key '{key}'")
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise _fail(text, f"'{key}' must be an integer >= {minimum}, got {v!r}", key)
    return v


def parse_problem(text: str, source: str = "<string>", n_steps: int | None = None) -> ProblemSpec:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        mt = re.search(r"line (\d+), column (\d+)", str(e))
        if mt is None and "end of document" in str(e):
            mt = re.match(r"(\d+), (\d+)", f"{text.count(chr(10)) + 1}, {len(text.rsplit(chr(10), 1)[-1]) + 1}")
        msg = re.sub(r"\s*\(at line \d+, column \d+\)", "", str(e))
        raise ProblemFileError(f"{source}: {msg}", line=int(mt.group(1)) if mt else None,
                               col=int(mt.group(2)) if mt else None) from None
    unknown = set(doc) - TOP_KEYS
    if unknown:
        k = sorted(unknown)[0]
        raise _fail(text, f"unknown key '{k}'", k)
    n, m = _int(text, doc, "n"), _int(text, doc, "m")
    steps = _int(text, doc, "n_steps") if n_steps is None else int(n_steps)
    if "T" not in doc:
        raise ProblemFileError("missing required key 'T'")
    try:
        grid = TimeGrid(float(doc["T"]), steps)
    except (InputError, ValueError, TypeError) as e:
        raise _fail(text, str(e), "T")
    x0 = doc.get("x0", [0.0] * n)
    try:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    except (TypeError, ValueError):
        raise _fail(text, "x0 must be a list of numbers", "x0")
    marks = doc.get("marks", [])
    if not isinstance(marks, list) or not all(isinstance(z, dict) for z in marks):
        raise _fail(text, "marks must be given as [[marks]] tables", "marks")
    try:
        jumps = JumpModel(tuple(str(z.get("label", f"z{i + 1}")) for i, z in enumerate(marks)),
                          tuple(float(z.get("intensity", np.nan)) for z in marks))
    except (InputError, TypeError, ValueError) as e:
        line, _ = _locate(text, "intensity")
        raise ProblemFileError(f"marks: {e}", line=line)
    K = jumps.K
    raw = doc.get("coefficients", {})
    if not isinstance(raw, dict):
        raise _fail(text, "[coefficients] must be a table", "coefficients")
    kw = {}
    for name, val in raw.items():
        if name not in COEF_NAMES:
            raise _fail(text, f"unknown coefficient '{name}'", name, "coefficients")
        if name in PER_MARK:
            items = val if isinstance(val, list) and (not val or isinstance(val[0], dict)
                                                       or np.ndim(val) == 3) else None
            if items is None:
                raise _fail(text, f"coefficient {name}: expected one matrix per mark", name, "coefficients")
            if len(items) != K:
                raise _fail(text, f"coefficient {name}: {len(items)} entries for {K} marks", name, "coefficients")
            kw[name] = [_coefficient(text, name, v) for v in items]
        else:
            kw[name] = _coefficient(text, name, val)
    if "delta" in doc:
        delta = doc["delta"]
        if isinstance(delta, bool) or not isinstance(delta, (int, float)):
            raise _fail(text, "delta must be a number", "delta")
    else:
        delta = _default_delta(kw.get("R"))
    mode = doc.get("coefficient_mode", "deterministic")
    cs = CoefficientSet(**kw, delta=float(delta))
    return ProblemSpec(n=n, m=m, x0=x0, grid=grid, coeffs=cs, jumps=jumps, coefficient_mode=mode,
                       name=str(doc.get("name", "")))


def _default_delta(R):
    if R is None:
        return 0.0                 # rejected by validation with a message naming R
    mats = [R.value] if R.kind == "constant" else list(R.values)
    try:
        lo = min(float(np.linalg.eigvalsh(0.5 * (M + M.T))[0]) for M in mats)
    except np.linalg.LinAlgError:
        return 0.0
    return 0.5 * lo if lo > 0 else 0.0


def annotate(err: MFSLQError, text: str) -> MFSLQError:
    """Attach the source line of the offending coefficient to a validation error."""
    name = err.context.get("coefficient")
    if name and "line" not in err.context:
        line, col = _locate(text, name, "coefficients")
        if line is not None:
            err.context.update(line=line, col=col)
            err.args = (f"{err.args[0]} (line {line})",) + err.args[1:]
    return err


def read_problem(path, n_steps: int | None = None) -> tuple[ProblemSpec, str]:
    """Parse a problem file. Returns (spec, sha256 of the file bytes)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise InputError(f"cannot read problem file {path}: {e.strerror}", path=str(path)) from None
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ProblemFileError(f"{path}: not UTF-8 ({e.reason})") from None
    return parse_problem(text, str(path), n_steps), hashlib.sha256(data).hexdigest()


def shipped_problem(name: str) -> str:
    """Path of a bundled example problem ('cp_lq1', 'cp_j1', 'mf1')."""
    try:
        fname = SHIPPED[name.lower().replace("-", "_")]
    except KeyError:
        raise InputError(f"unknown example problem {name!r}; choose from {sorted(SHIPPED)}") from None
    return str(resources.files("mfslq").joinpath("problems").joinpath(fname))
