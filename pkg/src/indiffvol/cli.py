"""Batch front end.

    indiffvol {price,iv-surface,spread,nontraded-price,verify,order-check}
              --config PATH [--out PATH] [--jobs N] [--seed U64]
              [--order {0,1,2}] [--side {buyer,seller,both}]

Exit codes: 0 success, 2 configuration error, 3 numerical error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .implied_vol import (SURFACE_COLUMNS, ImpliedVolError, implied_vol_invert,
                          iv_terms_closed_form, iv_terms_generic_split, surface)
from .model_spec import (COEFF_NAMES, LSVModel, TaylorTable, constant_model, heston_model,
                         reciprocal_heston_model, taylor_table)
from .nontraded_pricing import PayoffY, convergence_order_probe, nontraded_expansion
from .operator_engine import QuadratureError
from .traded_pricing import CallSpec, IndifferenceSetting, bs_call, u_terms

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
TAYLOR_INDEX = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
NUMERIC_ERRORS = (ArithmeticError, QuadratureError, ImpliedVolError, RuntimeError)


class ConfigError(ValueError):
    pass


# --- configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    model: Optional[LSVModel]
    table: Optional[TaylorTable]
    gamma_nu: float = 25.0
    x: float = 0.0
    y: float = 0.04
    t: float = 0.0
    strikes: List[float] = field(default_factory=lambda: [0.0])
    maturities: List[float] = field(default_factory=lambda: [0.25])
    k1: List[float] = field(default_factory=list)
    k2: float = 2.0
    taus: List[float] = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    y_grid: List[float] = field(default_factory=list)
    order: int = 2
    side: str = "both"
    seed: int = 0
    options: Dict[str, object] = field(default_factory=dict)

    def table_at(self, x: float, y: float) -> TaylorTable:
        if self.table is not None:
            if (self.table.xbar, self.table.ybar) != (x, y):
                return self.table.at_point(x, y)
            return self.table
        tab = taylor_table(self.model, x, y)
        if self.options.get("zero_h01"):
            tab = tab.with_entries(h={(0, 1): 0.0})
        return tab

    def sides(self) -> List[str]:
        return ["buyer", "seller"] if self.side == "both" else [self.side]

    def setting(self, side: str) -> IndifferenceSetting:
        sign = 1.0 if side == "buyer" else -1.0
        return IndifferenceSetting(sign * abs(self.gamma_nu), self.x, self.y)


def _read_file(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            if sys.version_info >= (3, 11):
                import tomllib
            else:
                import tomli as tomllib
            return tomllib.loads(text)
        return json.loads(text)
    except Exception as exc:  # parse errors of either format
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _floats(v, name) -> List[float]:
    if isinstance(v, dict) and {"start", "stop", "num"} <= set(v):
        return [float(z) for z in np.linspace(v["start"], v["stop"], int(v["num"]))]
    vals = v if isinstance(v, (list, tuple)) else [v]
    try:
        out = [float(z) for z in vals]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{name}' must be numbers") from exc
    if not out:
        raise ConfigError(f"'{name}' must be non-empty")
    return out


def _table_from_config(tab: dict) -> TaylorTable:
    entries = {}
    for name in COEFF_NAMES:
        raw = tab.get(name, {})
        if isinstance(raw, (list, tuple)):
            if len(raw) != 6:
                raise ConfigError(f"table '{name}' needs 6 entries ordered {TAYLOR_INDEX}")
            entries[name] = dict(zip(TAYLOR_INDEX, map(float, raw)))
        else:
            d = {}
            for key, v in raw.items():
                i, j = (int(s) for s in str(key).split(","))
                d[(i, j)] = float(v)
            entries[name] = d
    try:
        return TaylorTable.from_entries(float(tab.get("xbar", 0.0)), float(tab.get("ybar", 0.0)),
                                        float(tab.get("rho", 0.0)), entries)
    except ValueError as exc:
        raise ConfigError(f"invalid Taylor table: {exc}") from exc


def _model_from_config(sec: dict):
    if "table" in sec:
        return None, _table_from_config(sec["table"])
    kind = sec.get("builtin")
    p = {k: v for k, v in sec.items() if k != "builtin"}
    try:
        if kind == "heston":
            lam = p.get("lambda", 0.0)
            return heston_model(p["delta"], p["theta"], p["kappa"], p["rho"],
                                lambda_fn=tuple(lam) if isinstance(lam, list) else lam), None
        if kind == "reciprocal_heston":
            return reciprocal_heston_model(p["a"], p["b"], p["kappa"], p["mu"], p["rho"]), None
        if kind == "constant":
            return constant_model(p["sigma"], beta=p.get("beta", 0.0), c=p.get("c", 0.0),
                                  mu=p.get("mu", 0.0), rho=p.get("rho", 0.0)), None
    except KeyError as exc:
        raise ConfigError(f"builtin '{kind}' is missing parameter {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"builtin '{kind}': {exc}") from exc
    raise ConfigError(f"model section needs builtin in heston|reciprocal_heston|constant or a table, got {kind!r}")


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    raw = _read_file(Path(path))
    if "model" not in raw:
        raise ConfigError("config has no [model] section")
    model, table = _model_from_config(raw["model"])
    st = raw.get("setting", {})
    sw = raw.get("sweep", {})
    op = dict(raw.get("options", {}))
    cfg = RunConfig(model=model, table=table)
    cfg.gamma_nu = float(st.get("gamma_nu", cfg.gamma_nu))
    cfg.x = float(st.get("x", table.xbar if table is not None else cfg.x))
    cfg.y = float(st.get("y", table.ybar if table is not None else cfg.y))
    cfg.t = float(st.get("t", 0.0))
    if "moneyness" in sw:
        cfg.strikes = [cfg.x + L for L in _floats(sw["moneyness"], "moneyness")]
    elif "strikes" in sw:
        cfg.strikes = _floats(sw["strikes"], "strikes")
    if "maturities" in sw:
        cfg.maturities = _floats(sw["maturities"], "maturities")
    if "k1" in sw:
        cfg.k1 = _floats(sw["k1"], "k1")
    cfg.k2 = float(sw.get("k2", cfg.k2))
    if "taus" in sw:
        cfg.taus = _floats(sw["taus"], "taus")
    if "y_grid" in sw:
        cfg.y_grid = _floats(sw["y_grid"], "y_grid")
    cfg.order = int(op.pop("order", cfg.order))
    cfg.side = str(op.pop("side", cfg.side))
    cfg.seed = int(op.pop("seed", cfg.seed))
    cfg.options = op
    for k, v in (overrides or {}).items():
        if v is not None:
            setattr(cfg, k, v)
    if cfg.order not in (0, 1, 2):
        raise ConfigError(f"order must be 0, 1 or 2, got {cfg.order}")
    if cfg.side not in ("buyer", "seller", "both"):
        raise ConfigError(f"side must be buyer, seller or both, got {cfg.side!r}")
    if any(T <= cfg.t for T in cfg.maturities):
        raise ConfigError("every maturity must exceed t")
    return cfg


# --- output -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def write_csv(rows: Sequence[Sequence], columns: Sequence[str], out: Optional[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    if out:
        Path(out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def _require_model(cfg: RunConfig, what: str) -> LSVModel:
    if cfg.model is None:
        raise ConfigError(f"{what} needs a builtin model, not a Taylor table")
    return cfg.model


# --- commands -----------------------------------------------------------------

PRICE_COLUMNS = ("k", "T", "side", "gamma_nu", "u0", "u1", "u2_lin", "u2_ind",
                 "ubar_0", "ubar_1", "ubar_2", "ubar_m", "error")


def cmd_price(cfg: RunConfig, out=None, jobs=1) -> int:
    tab = cfg.table_at(cfg.x, cfg.y)
    items = [(s, T, k) for s in cfg.sides() for T in cfg.maturities for k in cfg.strikes]

    def row(item):
        side, T, k = item
        st = cfg.setting(side)
        try:
            pe = u_terms(tab, CallSpec(k=k, T=T, t=cfg.t), st)
            ub = pe.ubar
            return (k, T, side, st.gamma_nu, pe.u0, pe.u1, pe.u2_lin, pe.u2_ind,
                    *ub, ub[cfg.order], "")
        except NUMERIC_ERRORS + (ValueError,) as exc:
            return (k, T, side, st.gamma_nu) + (math.nan,) * 8 + (f"{type(exc).__name__}: {exc}",)

    rows = _pmap(row, items, jobs)
    write_csv(rows, PRICE_COLUMNS, out)
    bad = [r for r in rows if r[-1]]
    for r in bad:
        print(f"row k={r[0]} T={r[1]} side={r[2]}: {r[-1]}", file=sys.stderr)
    return EXIT_NUMERIC if bad else EXIT_OK


def _heston_params(model: Optional[LSVModel]):
    if model is None or model.name != "heston":
        return None
    p = model.params
    return p["delta"], p["theta"], p["kappa"], p["rho"]


def exact_heston_iv(params, x, y, k, T, t=0.0) -> float:
    from .oracles.heston import heston_call_exact
    return implied_vol_invert(heston_call_exact(*params, x, y, k, T, t=t), t, x, k, T)


CURVE_COLUMNS = ("k", "T", "L", "iv_buyer", "iv_seller", "iv_exact", "iv_linear")


def iv_curves(cfg: RunConfig, jobs=1) -> List[tuple]:
    """Buyer and seller second-order vols, the exact Heston vol and ``ivbar_2 - Sigma2_ind``."""
    tab = cfg.table_at(cfg.x, cfg.y)
    params = _heston_params(cfg.model)
    items = [(T, k) for T in cfg.maturities for k in cfg.strikes]

    def row(item):
        T, k = item
        spec = CallSpec(k=k, T=T, t=cfg.t)
        buy = iv_terms_closed_form(tab, spec, cfg.setting("buyer"))
        sell = iv_terms_closed_form(tab, spec, cfg.setting("seller"))
        exact = exact_heston_iv(params, cfg.x, cfg.y, k, T, cfg.t) if params else math.nan
        return (k, T, k - cfg.x, buy.ivbar[2], sell.ivbar[2], exact, buy.ivbar[2] - buy.sigma2_ind)

    return _pmap(row, items, jobs)


def cmd_iv_surface(cfg: RunConfig, out=None, jobs=1) -> int:
    tab = cfg.table_at(cfg.x, cfg.y)
    rows = []
    for side in cfg.sides():
        rows += surface(cfg.model, cfg.setting(side), cfg.strikes, cfg.maturities,
                        side=side, t=cfg.t, table=tab)
    write_csv([r.as_tuple() for r in rows], SURFACE_COLUMNS, out)
    code = EXIT_OK
    for r in rows:
        if r.error:
            print(f"row k={r.k} T={r.T} side={r.side}: {r.error}", file=sys.stderr)
            code = EXIT_NUMERIC
    if cfg.side == "both":
        try:
            curves = iv_curves(cfg, jobs)
        except NUMERIC_ERRORS + (ValueError,) as exc:
            print(f"curve dataset failed: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        cpath = None
        if out:
            p = Path(out)
            cpath = str(p.with_name(p.stem + "_curves" + (p.suffix or ".csv")))
        write_csv(curves, CURVE_COLUMNS, cpath)
    return code


SPREAD_COLUMNS = ("k", "T", "L", "bid_price", "ask_price", "price_spread",
                  "bid_iv", "ask_iv", "iv_spread")


def cmd_spread(cfg: RunConfig, out=None, jobs=1) -> int:
    tab = cfg.table_at(cfg.x, cfg.y)
    items = [(T, k) for T in cfg.maturities for k in cfg.strikes]

    def row(item):
        T, k = item
        spec = CallSpec(k=k, T=T, t=cfg.t)
        pb = u_terms(tab, spec, cfg.setting("buyer")).ubar[cfg.order]
        ps = u_terms(tab, spec, cfg.setting("seller")).ubar[cfg.order]
        ib = iv_terms_closed_form(tab, spec, cfg.setting("buyer")).ivbar[cfg.order]
        isl = iv_terms_closed_form(tab, spec, cfg.setting("seller")).ivbar[cfg.order]
        return (k, T, k - cfg.x, pb, ps, ps - pb, ib, isl, isl - ib)

    try:
        rows = _pmap(row, items, jobs)
    except NUMERIC_ERRORS as exc:
        print(f"spread failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_csv(rows, SPREAD_COLUMNS, out)
    return EXIT_OK


NONTRADED_COLUMNS = ("k1", "k2", "gamma_nu", "ubar_0", "ubar_1", "ubar_2", "oracle_u", "abs_err")


def nontraded_rows(model: LSVModel, k1s, k2, gamma_nu, y, tau, oracle=True, jobs=1):
    from .oracles.fd import nontraded_price_fd

    def row(k1):
        pay = PayoffY.call_spread(k1, k2)
        ub = nontraded_expansion(model, pay, gamma_nu, 0.0, y, tau).ubar
        if oracle:
            u, _ = nontraded_price_fd(model, pay, gamma_nu, tau, [y])
            u = float(u[0])
        else:
            u = math.nan
        return (k1, k2, gamma_nu, *ub, u, abs(u - ub[2]))

    return _pmap(row, list(k1s), jobs)


def cmd_nontraded(cfg: RunConfig, out=None, jobs=1) -> int:
    model = _require_model(cfg, "nontraded-price")
    if not cfg.k1:
        raise ConfigError("nontraded-price needs sweep.k1")
    tau = cfg.maturities[0] - cfg.t
    rows = []
    try:
        for side in cfg.sides():
            rows += nontraded_rows(model, cfg.k1, cfg.k2, cfg.setting(side).gamma_nu, cfg.y, tau,
                                   oracle=bool(cfg.options.get("oracle", True)), jobs=jobs)
    except NUMERIC_ERRORS as exc:
        print(f"nontraded-price failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_csv(rows, NONTRADED_COLUMNS, out)
    return EXIT_OK


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def _degeneracy_checks() -> List[Check]:
    tab = TaylorTable.constant(0.02, b=0.001, f=0.1, g=0.0, h=0.0, rho=-0.3)
    worst_u = worst_iv = 0.0
    for k in (-0.2, 0.0, 0.2):
        for T in (0.1, 1.0):
            spec = CallSpec(k=k, T=T)
            st = IndifferenceSetting(10.0, 0.0, 0.0)
            worst_u = max(worst_u, abs(u_terms(tab, spec, st).ubar[2] - bs_call(0.0, 0.0, 0.2, k, T)))
            worst_iv = max(worst_iv, abs(iv_terms_closed_form(tab, spec, st).ivbar[2] - 0.2))
    return [Check("constant model: ubar_2 = Black-Scholes", worst_u <= 1e-12, worst_u, 1e-12),
            Check("constant model: ivbar_2 = sigma0", worst_iv <= 1e-12, worst_iv, 1e-12)]


def verify_checks(cfg: RunConfig) -> List[Check]:
    checks = _degeneracy_checks()
    tab = cfg.table_at(cfg.x, cfg.y)
    worst = 0.0
    order_ok = True
    rt = 0.0
    for T in cfg.maturities:
        for k in cfg.strikes:
            spec = CallSpec(k=k, T=T, t=cfg.t)
            buy = cfg.setting("buyer")
            cf = iv_terms_closed_form(tab, spec, buy)
            gen = iv_terms_generic_split(tab, spec, buy)
            worst = max(worst, abs(cf.ivbar[2] - gen.ivbar[2]))
            sell = iv_terms_closed_form(tab, spec, cfg.setting("seller"))
            order_ok &= sell.ivbar[2] >= cf.ivbar[2]
            u = bs_call(cfg.t, cfg.x, cf.sigma0, k, T)
            rt = max(rt, abs(implied_vol_invert(u, cfg.t, cfg.x, k, T) - cf.sigma0))
    checks.append(Check("closed form = generic recursion", worst <= 1e-10, worst, 1e-10))
    checks.append(Check("seller ivbar_2 >= buyer ivbar_2", bool(order_ok), 0.0, 0.0))
    checks.append(Check("inverter round trip", rt <= 1e-10, rt, 1e-10))
    params = _heston_params(cfg.model)
    if params:
        from .oracles.heston import heston_call_exact
        tol = float(cfg.options.get("tol_exact", 5e-4)) * math.exp(cfg.x)
        err = 0.0
        for T in cfg.maturities:
            for k in cfg.strikes:
                q = u_terms(tab, CallSpec(k=k, T=T, t=cfg.t), cfg.setting("buyer")).qbar2
                err = max(err, abs(q - heston_call_exact(*params, cfg.x, cfg.y, k, T, t=cfg.t)))
        checks.append(Check("linear price qbar_2 vs exact Heston", err <= tol, err, tol))
    if cfg.model is not None and cfg.k1:
        tau = cfg.maturities[0] - cfg.t
        worst = 0.0
        for row in nontraded_rows(cfg.model, cfg.k1, cfg.k2, cfg.setting("buyer").gamma_nu, cfg.y, tau):
            worst = max(worst, row[-1] / (row[1] - row[0]))
        checks.append(Check("non-traded ubar_2 vs FD / (k2 - k1)", worst <= 0.02, worst, 0.02))
    return checks


def cmd_verify(cfg: RunConfig, out=None, jobs=1) -> int:
    try:
        checks = verify_checks(cfg)
    except NUMERIC_ERRORS as exc:
        print(f"verification aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  value={c.value:.3e}  tol={c.tolerance:.1e}")
    if out:
        Path(out).write_text(json.dumps([c.__dict__ for c in checks], indent=2))
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


ORDER_COLUMNS = ("m", "slope", "required", "flagged", *[f"err_{i}" for i in range(4)])


def cmd_order_check(cfg: RunConfig, out=None, jobs=1) -> int:
    model = _require_model(cfg, "order-check")
    k1 = cfg.k1[0] if cfg.k1 else cfg.y
    pay = PayoffY.call_spread(k1, cfg.k2)
    ygrid = cfg.y_grid or None
    gn = cfg.setting(cfg.sides()[0]).gamma_nu

    def probe(m):
        return convergence_order_probe(model, pay, gn, cfg.y, cfg.taus, m, y_grid=ygrid)

    try:
        res = _pmap(probe, list(range(cfg.order + 1)), jobs)
    except NUMERIC_ERRORS as exc:
        print(f"order-check failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    rows, bad = [], []
    for r in res:
        need = (r.m + 2) / 2 - 0.3
        rows.append((r.m, r.slope, need, r.flagged, *r.errors[:4]))
        if r.slope < need:
            bad.append(f"m={r.m} slope {r.slope:.3f} < {need:.2f}")
    if len(res) == 3:
        d = res[2].slope - res[0].slope
        if not 0.6 <= d <= 1.4:
            bad.append(f"slope(2) - slope(0) = {d:.3f} outside [0.6, 1.4]")
    write_csv(rows, ORDER_COLUMNS[:4 + min(4, len(cfg.taus))], out)
    for b in bad:
        print(b, file=sys.stderr)
    return EXIT_VERIFY if bad else EXIT_OK


COMMANDS = {
    "price": cmd_price,
    "iv-surface": cmd_iv_surface,
    "spread": cmd_spread,
    "nontraded-price": cmd_nontraded,
    "verify": cmd_verify,
    "order-check": cmd_order_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="indiffvol", description="Indifference prices and implied vols.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--order", type=int, choices=(0, 1, 2))
    ap.add_argument("--side", choices=("buyer", "seller", "both"))
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "order": args.order, "side": args.side})
        return COMMANDS[args.command](cfg, out=args.out, jobs=max(1, args.jobs))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
