#!/usr/bin/env python3
"""External MILP solver for `qsg`: `milp_solve.py <model.lp> <solution.out>`.

Reads the LP-format subset that `qsg export-lp` writes (one objective,
`Subject To`, `Bounds`, `Binaries`/`Generals`) and solves it with
scipy.optimize.milp (HiGHS). Writes a `status` line followed by
`name value` pairs.

Use it with `--solver-cmd "python3 scripts/milp_solve.py"` or through the
QSG_MILP_SOLVER environment variable.
"""
import re
import sys

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import lil_matrix

SECTIONS = {
    "maximize": "obj", "maximise": "obj", "max": "obj",
    "minimize": "obj", "minimise": "obj", "min": "obj",
    "subject to": "rows", "such that": "rows", "st": "rows", "s.t.": "rows",
    "bounds": "bounds", "binaries": "bin", "binary": "bin", "bin": "bin",
    "generals": "gen", "general": "gen", "end": "end",
}
TOKEN = re.compile(r"\s*([+-]?\s*(?:\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|inf(?:inity)?)|[A-Za-z_][\w.\[\]]*|[+-])", re.I)


def parse_expr(text):
    """Linear expression -> list of (coef, name)."""
    terms, sign, coef = [], 1.0, None
    for tok in TOKEN.findall(text):
        tok = tok.replace(" ", "")
        if tok in "+-":
            sign = -1.0 if tok == "-" else 1.0
        elif re.match(r"^[A-Za-z_]", tok) and not re.match(r"^inf", tok, re.I):
            terms.append((sign * (1.0 if coef is None else coef), tok))
            sign, coef = 1.0, None
        else:
            coef = float(tok)
            if coef < 0 or tok.startswith("-"):
                sign, coef = -sign, abs(coef)
    return terms


def read_lp(path):
    sense, objective, rows, bounds, integer = 1, [], [], {}, set()
    section, pending = None, ""
    lines = [l.split("\\", 1)[0].rstrip() for l in open(path)]
    for line in lines + ["end"]:
        line = line.strip()
        if not line:
            continue
        key = SECTIONS.get(line.lower())
        if key:
            if pending:
                rows.append(pending)
                pending = ""
            if line.lower().startswith("max"):
                sense = -1
            section = key
            continue
        if section == "obj":
            objective += parse_expr(re.sub(r"^[A-Za-z_][\w.]*\s*:", "", line))
        elif section == "rows":
            if re.match(r"^[A-Za-z_][\w.]*\s*:", line) and pending:
                rows.append(pending)
                pending = line
            else:
                pending = (pending + " " + line).strip()
        elif section == "bounds":
            parse_bound(line, bounds)
        elif section in ("bin", "gen"):
            for name in line.split():
                integer.add(name)
                if section == "bin":
                    bounds[name] = (0.0, 1.0)
    return sense, objective, rows, bounds, integer


def parse_bound(line, bounds):
    low = line.lower()
    if low.endswith(" free"):
        bounds[line.split()[0]] = (-np.inf, np.inf)
        return
    parts = re.split(r"\s*(<=|>=|=<|=>|=)\s*", line)
    num = lambda s: float(s.replace("infinity", "inf").replace("Infinity", "inf"))
    if len(parts) == 5:
        bounds[parts[2]] = (num(parts[0]), num(parts[4]))
    elif len(parts) == 3:
        a, op, b = parts
        lo, hi = bounds.get(a if re.match(r"^[A-Za-z_]", a) else b, (0.0, np.inf))
        if re.match(r"^[A-Za-z_]", a):
            name, v = a, num(b)
            lo, hi = (v, hi) if op in (">=", "=>") else (lo, v) if op in ("<=", "=<") else (v, v)
        else:
            name, v = b, num(a)
            lo, hi = (lo, v) if op in (">=", "=>") else (v, hi) if op in ("<=", "=<") else (v, v)
        bounds[name] = (lo, hi)


def main(argv):
    if len(argv) != 3:
        print("usage: milp_solve.py <model.lp> <solution.out>", file=sys.stderr)
        return 2
    sense, objective, rows, bounds, integer = read_lp(argv[1])
    names, index = [], {}

    def col(name):
        if name not in index:
            index[name] = len(names)
            names.append(name)
        return index[name]

    for _, name in objective:
        col(name)
    parsed = []
    for row in rows:
        body = row.split(":", 1)[1] if re.match(r"^[A-Za-z_][\w.]*\s*:", row) else row
        expr, op, rhs = re.split(r"\s*(<=|>=|=<|=>|=)\s*", body)
        terms = parse_expr(expr)
        for _, name in terms:
            col(name)
        parsed.append((terms, op, float(rhs)))
    for name in list(bounds) + sorted(integer):
        col(name)

    n = len(names)
    c = np.zeros(n)
    for coef, name in objective:
        c[index[name]] += sense * coef
    a = lil_matrix((max(len(parsed), 1), n))
    lo = np.full(max(len(parsed), 1), -np.inf)
    hi = np.full(max(len(parsed), 1), np.inf)
    for i, (terms, op, rhs) in enumerate(parsed):
        for coef, name in terms:
            a[i, index[name]] += coef
        if op in ("<=", "=<", "="):
            hi[i] = rhs
        if op in (">=", "=>", "="):
            lo[i] = rhs
    lb = np.array([bounds.get(v, (0.0, np.inf))[0] for v in names])
    ub = np.array([bounds.get(v, (0.0, np.inf))[1] for v in names])
    integrality = np.array([1 if v in integer else 0 for v in names])
    res = milp(
        c,
        constraints=[LinearConstraint(a.tocsr(), lo, hi)] if parsed else None,
        bounds=Bounds(lb, ub),
        integrality=integrality,
        options={"mip_rel_gap": 1e-9},
    )
    with open(argv[2], "w") as out:
        if res.status == 2:
            out.write("status infeasible\n")
            return 0
        if res.x is None:
            print(f"solver failed: {res.message}", file=sys.stderr)
            return 1
        out.write("status optimal\n" if res.status == 0 else "status feasible\n")
        out.write(f"objective {float(sense * res.fun)!r}\n")
        for name, v in zip(names, res.x):
            if name in integer:
                v = float(round(v))
            out.write(f"{name} {float(v)!r}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
