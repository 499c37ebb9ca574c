"""Command-line front end for reproducible experiment runs.

Commands: risk, bound, gibbs, cro, enumerate, fixtures.  Inputs come either
from a built-in fixture or from diagram/dataset files; options may also be
supplied through a ``key = value`` config file, with explicit flags winning.
Reports are JSON summaries plus CSV traces with sorted keys and no
timestamps, so identical invocations produce byte-identical files.

Exit codes: 0 ok, 2 bad input or config, 3 infeasible constraints, 4 budget
exhausted, 5 internal error.
"""

from __future__ import annotations

import csv
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import click
from click.core import ParameterSource

from . import __version__
from .bounds import BoundTask, OptimizerConfig, solve_bounds
from .cro import CroConfig, cro_loop
from .errors import BudgetError, InfeasibleError, InputError
from .fixtures import _BUILDERS, FixtureBundle, builtin_classifier, fixture
from .gibbs import run_chain
from .graphs import parse_diagram
from .scm import (
    TabularClassifier,
    datasets_from_csv,
    risk as exact_risk,
    zero_one_loss,
)


# ---------------------------------------------------------------------------
# configuration plumbing


def _parse_config_file(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InputError(f"config value {text!r} is not a boolean")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _resolve(ctx, **params) -> dict:
    """Overlay config-file values onto parameters left at their defaults."""
    cfg = (ctx.obj or {}).get("config", {})
    out = {}
    for key, val in params.items():
        # flag names drop the _name/_path suffix of their parameter names
        alias = key.removesuffix("_name").removesuffix("_path")
        found = key if key in cfg else (alias if alias in cfg else None)
        if found is not None and ctx.get_parameter_source(key) == ParameterSource.DEFAULT:
            out[key] = _coerce(cfg[found], val)
        else:
            out[key] = val
    return out


def _globals(ctx) -> dict:
    return ctx.obj or {"seed": 0, "jobs": 1, "out": None}


def _emit(gl: dict, name: str, text: str) -> None:
    if gl.get("out"):
        out_dir = Path(gl["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text)
        click.echo(f"wrote {out_dir / name}")


def _summary_json(command: str, gl: dict, options: dict, payload: dict) -> str:
    doc = {
        "command": command,
        "options": options,
        "seed": gl["seed"],
        "version": __version__,
    }
    doc.update(payload)
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# input loading


@dataclass
class _Inputs:
    sel: object
    supports: dict
    scms: dict
    datasets: dict
    label: str | None
    bundle: FixtureBundle | None


def _load_inputs(fixture_name: str | None, diagram_path: str | None,
                 data_path: str | None) -> _Inputs:
    if bool(fixture_name) == bool(diagram_path):
        raise InputError("exactly one of --fixture or --diagram is required")
    if fixture_name:
        bundle = fixture(fixture_name)
        return _Inputs(bundle.sel, bundle.supports, dict(bundle.scms), {},
                       bundle.label, bundle)
    sel, cards = parse_diagram(Path(diagram_path).read_text())
    supports = {v: tuple(range(cards[v])) for v in sel.base.nodes}
    datasets = {}
    if data_path:
        for ds in datasets_from_csv(Path(data_path).read_text(), supports):
            datasets[ds.domain] = ds
    return _Inputs(sel, supports, {}, datasets, None, None)


def _match_value(tok: str, support):
    for val in support:
        if str(val) == tok:
            return val
    raise InputError(f"value {tok!r} outside support")


def _classifier_from_csv(path: str, supports: dict) -> TabularClassifier:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or len(rows[0]) < 2:
        raise InputError("classifier CSV needs a header of inputs plus a label")
    header = rows[0]
    scope, label = tuple(header[:-1]), header[-1]
    for v in scope + (label,):
        if v not in supports:
            raise InputError(f"classifier column {v!r} has no declared support")
    table = {}
    for r in rows[1:]:
        if not r:
            continue
        if len(r) != len(header):
            raise InputError("classifier CSV row has the wrong column count")
        combo = tuple(
            _match_value(tok, supports[v]) for tok, v in zip(r[:-1], scope)
        )
        table[combo] = _match_value(r[-1], supports[label])
    sub = {v: supports[v] for v in scope + (label,)}
    return TabularClassifier(scope, label, sub, table)


def _get_classifier(inputs: _Inputs, name: str | None) -> TabularClassifier:
    if not name:
        raise InputError("--classifier is required")
    if Path(name).suffix == ".csv" or Path(name).exists():
        return _classifier_from_csv(name, inputs.supports)
    if inputs.bundle is None:
        raise InputError("built-in classifier names need a fixture input")
    return builtin_classifier(inputs.bundle, name)


def _source_joints(inputs: _Inputs, n: int, seed: int) -> dict:
    """Exact entailed joints at n = 0, else n sampled rows per source."""
    if inputs.datasets:
        return dict(inputs.datasets)
    sources = {}
    for i, d in enumerate(sorted(inputs.sel.sources)):
        if d not in inputs.scms:
            continue
        if n > 0:
            sources[d] = inputs.scms[d].sample(n, seed=seed + 1000 * (i + 1), domain=d)
        else:
            sources[d] = inputs.scms[d].entailed_distribution()
    if not sources:
        raise InputError("no source data available")
    return sources


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.option("--seed", type=int, default=0, help="Master random seed.")
@click.option("--jobs", type=int, default=1, help="Worker threads inside engines.")
@click.option("--out", type=str, default=None, help="Report output directory.")
@click.option("--config", "config_path", type=str, default=None,
              help="key = value file; explicit flags win.")
@click.pass_context
def cli(ctx, seed, jobs, out, config_path):
    """Bounds on target-domain classifier risk from multi-domain data."""
    config = _parse_config_file(config_path) if config_path else {}
    for key, default in (("seed", seed), ("jobs", jobs), ("out", out)):
        if key in config and ctx.get_parameter_source(key) == ParameterSource.DEFAULT:
            locals_val = _coerce(config[key], default if default is not None else "")
            config[key] = locals_val
    ctx.obj = {
        "seed": config.get("seed", seed),
        "jobs": config.get("jobs", jobs),
        "out": config.get("out", out),
        "config": config,
    }


@cli.command()
@click.option("--fixture", "fixture_name", type=str, default=None)
@click.option("--diagram", "diagram_path", type=str, default=None)
@click.option("--data", "data_path", type=str, default=None)
@click.option("--classifier", type=str, default=None,
              help="Built-in name or CSV path.")
@click.pass_context
def risk(ctx, fixture_name, diagram_path, data_path, classifier):
    """Exact classifier risk in every domain with a known model or data."""
    gl = _globals(ctx)
    params = _resolve(ctx, fixture_name=fixture_name, diagram_path=diagram_path,
                      data_path=data_path, classifier=classifier)
    inputs = _load_inputs(params["fixture_name"], params["diagram_path"],
                          params["data_path"])
    h = _get_classifier(inputs, params["classifier"])
    loss = zero_one_loss(h.supports[h.label])
    risks = {}
    for dom in sorted(inputs.scms):
        risks[dom] = exact_risk(inputs.scms[dom].entailed_distribution(), h, loss)
    for dom in sorted(inputs.datasets):
        risks[dom] = exact_risk(inputs.datasets[dom].empirical_joint(), h, loss)
    if not risks:
        raise InputError("no domain models or datasets to evaluate")
    text = _summary_json("risk", gl, {"classifier": params["classifier"]},
                         {"risks": risks})
    click.echo(text, nl=False)
    _emit(gl, "risk_summary.json", text)


@cli.command()
@click.option("--fixture", "fixture_name", type=str, default=None)
@click.option("--diagram", "diagram_path", type=str, default=None)
@click.option("--data", "data_path", type=str, default=None)
@click.option("--classifier", type=str, default=None)
@click.option("--direction", type=click.Choice(["max", "min", "both"]), default="max")
@click.option("--n", type=int, default=0, help="Rows per source; 0 = exact joints.")
@click.option("--restarts", type=int, default=10)
@click.option("--max-iters", type=int, default=200)
@click.option("--tol", type=float, default=1e-4)
@click.option("--shortcut/--no-shortcut", default=True,
              help="Replace transportable blocks with fitted factors.")
@click.pass_context
def bound(ctx, fixture_name, diagram_path, data_path, classifier, direction, n,
          restarts, max_iters, tol, shortcut):
    """Tight bounds on the target-domain risk of a classifier."""
    gl = _globals(ctx)
    params = _resolve(ctx, fixture_name=fixture_name, diagram_path=diagram_path,
                      data_path=data_path, classifier=classifier,
                      direction=direction, n=n, restarts=restarts,
                      max_iters=max_iters, tol=tol, shortcut=shortcut)
    inputs = _load_inputs(params["fixture_name"], params["diagram_path"],
                          params["data_path"])
    h = _get_classifier(inputs, params["classifier"])
    psi = h.loss_table(zero_one_loss(h.supports[h.label]))
    sources = _source_joints(inputs, params["n"], gl["seed"])
    cfg = OptimizerConfig(restarts=params["restarts"], max_iters=params["max_iters"],
                          tol=params["tol"], seed=gl["seed"],
                          shortcut=params["shortcut"], jobs=gl["jobs"])
    result = solve_bounds(
        BoundTask(inputs.sel, sources, psi, direction=params["direction"]), cfg
    )
    payload = {
        "lower": result.lower,
        "upper": result.upper,
        "status": result.status,
        "plan": [
            {"block": list(bp.block), "status": bp.status, "source": bp.source}
            for bp in result.plan.blocks
        ],
    }
    opts = {k: params[k] for k in
            ("classifier", "direction", "n", "restarts", "max_iters", "tol", "shortcut")}
    text = _summary_json("bound", gl, opts, payload)
    click.echo(text, nl=False)
    _emit(gl, "bound_summary.json", text)
    trace = "tag,value,residual\n" + "".join(
        f"{tag},{val!r},{res!r}\n" for tag, val, res in result.trace
    )
    _emit(gl, "bound_trace.csv", trace)


@cli.command()
@click.option("--fixture", "fixture_name", type=str, default=None)
@click.option("--diagram", "diagram_path", type=str, default=None)
@click.option("--data", "data_path", type=str, default=None)
@click.option("--classifier", type=str, default=None)
@click.option("--n", type=int, default=1000, help="Rows per source; 0 = prior only.")
@click.option("--iters", type=int, default=10000)
@click.option("--burn-in", type=int, default=2000)
@click.option("--alpha", type=float, default=1.0)
@click.option("--chains", type=int, default=4)
@click.pass_context
def gibbs(ctx, fixture_name, diagram_path, data_path, classifier, n, iters,
          burn_in, alpha, chains):
    """Posterior credible bounds on the target risk by Gibbs sampling."""
    gl = _globals(ctx)
    params = _resolve(ctx, fixture_name=fixture_name, diagram_path=diagram_path,
                      data_path=data_path, classifier=classifier, n=n,
                      iters=iters, burn_in=burn_in, alpha=alpha, chains=chains)
    inputs = _load_inputs(params["fixture_name"], params["diagram_path"],
                          params["data_path"])
    h = _get_classifier(inputs, params["classifier"])
    psi = h.loss_table(zero_one_loss(h.supports[h.label]))
    if inputs.datasets:
        datasets = dict(inputs.datasets)
    elif params["n"] > 0:
        datasets = _source_joints(inputs, params["n"], gl["seed"])
    else:
        datasets = {}
    summary = run_chain(inputs.sel, datasets, psi, iters=params["iters"],
                        burn_in=params["burn_in"], alpha=params["alpha"],
                        seed=gl["seed"], chains=params["chains"],
                        supports=inputs.supports)
    payload = {
        "alpha": summary.alpha,
        "q_hat_max": summary.q_hat_max,
        "q_hat_min": summary.q_hat_min,
        "diagnostics": summary.diagnostics,
    }
    opts = {k: params[k] for k in
            ("classifier", "n", "iters", "burn_in", "alpha", "chains")}
    text = _summary_json("gibbs", gl, opts, payload)
    click.echo(text, nl=False)
    _emit(gl, "gibbs_summary.json", text)
    _emit(gl, "gibbs_samples.csv", summary.report())


@cli.command()
@click.option("--fixture", "fixture_name", type=str, default=None)
@click.option("--diagram", "diagram_path", type=str, default=None)
@click.option("--data", "data_path", type=str, default=None)
@click.option("--scope", type=str, default=None,
              help="Comma-separated classifier inputs; default all non-label nodes.")
@click.option("--label", type=str, default=None)
@click.option("--delta", type=float, default=0.02)
@click.option("--rounds", type=int, default=20)
@click.option("--adversary-samples", type=int, default=5000)
@click.option("--exact-adversary/--sampled-adversary", default=False)
@click.option("--restarts", type=int, default=10)
@click.pass_context
def cro(ctx, fixture_name, diagram_path, data_path, scope, label, delta, rounds,
        adversary_samples, exact_adversary, restarts):
    """Worst-case-optimal classifier by iterated adversarial training."""
    gl = _globals(ctx)
    params = _resolve(ctx, fixture_name=fixture_name, diagram_path=diagram_path,
                      data_path=data_path, scope=scope, label=label, delta=delta,
                      rounds=rounds, adversary_samples=adversary_samples,
                      exact_adversary=exact_adversary, restarts=restarts)
    inputs = _load_inputs(params["fixture_name"], params["diagram_path"],
                          params["data_path"])
    label_v = params["label"] or inputs.label
    if label_v is None:
        raise InputError("--label is required without a labelled fixture")
    if params["scope"]:
        scope_v = tuple(s.strip() for s in params["scope"].split(","))
    else:
        scope_v = tuple(v for v in inputs.sel.base.nodes if v != label_v)
    sources = _source_joints(inputs, 0, gl["seed"])
    cfg = CroConfig(delta=params["delta"], max_rounds=params["rounds"],
                    adversary_samples=params["adversary_samples"],
                    exact_adversary=params["exact_adversary"], seed=gl["seed"],
                    optimizer=OptimizerConfig(restarts=params["restarts"],
                                              seed=gl["seed"], jobs=gl["jobs"]))
    result = cro_loop(inputs.sel, sources, scope_v, label_v, cfg=cfg)
    payload = {
        "status": result.status,
        "rounds": len(result.rounds),
        "worst_case_risk": result.rounds[-1][0],
        "gap": result.rounds[-1][2],
    }
    opts = {"scope": ",".join(scope_v), "label": label_v, "delta": params["delta"],
            "rounds": params["rounds"], "exact_adversary": params["exact_adversary"]}
    text = _summary_json("cro", gl, opts, payload)
    click.echo(text, nl=False)
    _emit(gl, "cro_summary.json", text)
    _emit(gl, "cro_classifier.csv", result.classifier_csv())
    _emit(gl, "cro_rounds.csv", result.rounds_csv())


@cli.command("enumerate")
@click.option("--fixture", "fixture_name", type=str, default=None)
@click.option("--diagram", "diagram_path", type=str, default=None)
@click.option("--query", type=str, default=None,
              help="Comma-separated query nodes; default all nodes.")
@click.pass_context
def enumerate_cmd(ctx, fixture_name, diagram_path, query):
    """Ancestral set, c-component blocks, and per-block transport status."""
    from .bounds import decompose_query

    gl = _globals(ctx)
    params = _resolve(ctx, fixture_name=fixture_name, diagram_path=diagram_path,
                      query=query)
    inputs = _load_inputs(params["fixture_name"], params["diagram_path"], None)
    if params["query"]:
        nodes = tuple(s.strip() for s in params["query"].split(","))
    else:
        nodes = inputs.sel.base.nodes
    plan = decompose_query(inputs.sel, nodes)
    payload = {
        "ancestral": list(plan.ancestral),
        "blocks": [
            {"block": list(bp.block), "status": bp.status, "source": bp.source}
            for bp in plan.blocks
        ],
    }
    text = _summary_json("enumerate", gl, {"query": ",".join(nodes)}, payload)
    click.echo(text, nl=False)
    _emit(gl, "enumerate_summary.json", text)


@cli.command()
@click.pass_context
def fixtures(ctx):
    """List the built-in fixtures."""
    gl = _globals(ctx)
    listing = {}
    for name in sorted(_BUILDERS):
        b = fixture(name)
        listing[name] = {
            "nodes": list(b.sel.base.nodes),
            "domains": list(b.sel.domains),
            "label": b.label,
            "has_scms": bool(b.scms),
        }
    text = _summary_json("fixtures", gl, {}, {"fixtures": listing})
    click.echo(text, nl=False)
    _emit(gl, "fixtures_summary.json", text)


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except InputError as exc:
        click.echo(f"input error: {exc}", err=True)
        sys.exit(2)
    except InfeasibleError as exc:
        click.echo(f"infeasible: {exc}", err=True)
        sys.exit(3)
    except BudgetError as exc:
        click.echo(f"budget exhausted: {exc}", err=True)
        sys.exit(4)
    except SystemExit:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        click.echo(f"internal error: {exc}", err=True)
        sys.exit(5)


if __name__ == "__main__":
    main()
