"""
CLI entry point for qclock.

Commands:
  qclock simulate    - Run one clock protocol and report its instability
  qclock sweep       - Refine protocol families over a range of qubit counts
  qclock curves      - Dump outcome probability curves of a protocol
  qclock noise-check - Validate the flicker noise calibration
  qclock search      - Random-restart search for new protocols
  qclock config      - Show or initialize the configuration
"""

import csv
import json
import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np
import yaml

from qclock import __version__
from qclock.checkpoint import CheckpointError
from qclock.config import Config
from qclock.manifest import RunManifest


logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_RESUME_CONFLICT = 4

BUILTIN_PROTOCOLS = ("ramsey", "ghz", "squeezed", "buzek")


class QclockGroup(click.Group):
    """Command group that maps library errors to exit codes."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CheckpointError as e:
            _fail(ctx, e, EXIT_RESUME_CONFLICT)
        except (ValueError, yaml.YAMLError) as e:
            _fail(ctx, e, EXIT_VALIDATION)
        except OSError as e:
            _fail(ctx, e, EXIT_IO)


def _fail(ctx: click.Context, error: Exception, code: int) -> None:
    click.echo(click.style("Error: ", fg="red") + str(error), err=True)
    ctx.exit(code)


def _configure_logging(level: str) -> None:
    logging.basicConfig(format="[qclock] %(message)s", level=getattr(logging, level.upper()), force=True)


def _write_json(data: dict, output: Optional[str]) -> None:
    text = json.dumps(data, indent=2, sort_keys=True)
    if output:
        Path(output).write_text(text + "\n")
        click.echo(click.style("✓ ", fg="green") + f"Wrote {output}", err=True)
    else:
        click.echo(text)


def _write_csv(path: str, manifest: RunManifest, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# {manifest.to_header()}\n")
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    click.echo(click.style("✓ ", fg="green") + f"Wrote {path}", err=True)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _search_config(ctx: click.Context, n: int, seed: int, **overrides):
    from qclock.search import search_config_from
    return search_config_from(n, ctx.obj, master_seed=seed, **overrides)


# ============================================================================
# Protocol selection
# ============================================================================

def protocol_options(f):
    """Options shared by every command that takes a protocol."""
    options = [
        click.option("--protocol", "source", required=True,
                     help="ramsey, ghz, squeezed, buzek, or file:PATH to a protocol JSON"),
        click.option("--n", "n", type=click.IntRange(1, 64), help="Qubit count (builtin protocols)"),
        click.option("--t", "t", type=float, help="Free-evolution period T, seconds [builtin default: 0.2]"),
        click.option("--kappa", type=float, help="Squeezing parameter (squeezed protocol)"),
        click.option("--half-shift/--no-half-shift", default=None,
                     help="Bužek half-step phase shift (default: on for odd n)"),
        click.option("--readout-phase", type=float, default=0.0, show_default=True,
                     help="GHZ readout phase, radians"),
        click.option("--orthonormalize", is_flag=True,
                     help="Snap a file basis to the nearest unitary (rounded inputs)"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _resolve_protocol(source, n, t, kappa, half_shift, readout_phase, orthonormalize):
    """Build the protocol named on the command line."""
    from qclock.protocols import build_family, load_protocol

    if source.startswith("file:"):
        protocol = load_protocol(source[len("file:"):], orthonormalize=orthonormalize)
        if n is not None and n != protocol.n:
            raise click.BadParameter(f"file protocol has n={protocol.n}, --n is {n}", param_hint="--n")
        return protocol.with_probe_period(t) if t is not None else protocol

    if source not in BUILTIN_PROTOCOLS:
        raise click.BadParameter(
            f"{source!r} is not one of {', '.join(BUILTIN_PROTOCOLS)} or file:PATH",
            param_hint="--protocol",
        )
    if n is None:
        raise click.BadParameter("required for builtin protocols", param_hint="--n")
    return build_family(
        source, n, t if t is not None else 0.2,
        kappa=kappa, half_shift=half_shift, readout_phase=readout_phase,
    )


# ============================================================================
# Commands
# ============================================================================

@click.group(cls=QclockGroup)
@click.version_option(version=__version__, prog_name="qclock")
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              help="Config file (default: $QCLOCK_CONFIG or ~/.config/qclock/config.yaml)")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def main(ctx: click.Context, config_path: Optional[str], verbose: bool):
    """qclock - Monte Carlo design of entangled atomic-clock protocols.

    Simulates clocks whose N qubits stay in the symmetric subspace, locked
    to a local oscillator with flicker frequency noise, and searches for
    protocols with lower long-term instability.
    """
    config = Config.load(config_path)
    errors = config.validate()
    if errors and ctx.invoked_subcommand != "config":
        raise ValueError("invalid configuration: " + "; ".join(errors))
    ctx.obj = config
    ctx.meta["config_path"] = Config.get_config_path(config_path)
    _configure_logging("DEBUG" if verbose else config.logging.level)


@main.command()
@protocol_options
@click.option("--optimize-kappa", is_flag=True, help="Refine a squeezed protocol including kappa")
@click.option("--refine", is_flag=True, help="Optimize corrections and T before the final run")
@click.option("--cycles", type=click.IntRange(min=1), help="Probe cycles (default from config)")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--output", "-o", type=click.Path(dir_okay=False), help="Report JSON (default stdout)")
@click.option("--dump-cycles", type=click.Path(dir_okay=False), help="Per-cycle CSV")
@click.option("--save-protocol", type=click.Path(dir_okay=False), help="Write the simulated protocol JSON")
@click.option("--holdout", is_flag=True,
              help="Re-evaluate a search winner (file:PATH) on its held-out seeds instead of simulating")
@click.pass_context
def simulate(ctx, source, n, t, kappa, half_shift, readout_phase, orthonormalize,
             optimize_kappa, refine, cycles, seed, output, dump_cycles, save_protocol, holdout):
    """Simulate one protocol and report its variance at 1 s."""
    from qclock.protocols import read_manifest, save_protocol as write_protocol
    from qclock.search import (
        HOLDOUT_SPLIT,
        evaluate_protocol,
        refine_known,
        refine_protocol,
        search_config_from_manifest,
    )
    from qclock.simulator import simulate as run_simulation

    config: Config = ctx.obj
    cycles = cycles or config.simulation.cycles

    if holdout:
        if not source.startswith("file:"):
            raise click.BadParameter("--holdout needs --protocol file:PATH", param_hint="--holdout")
        if t is not None or refine or optimize_kappa:
            raise click.BadParameter("--holdout evaluates the file protocol unchanged", param_hint="--holdout")
        path = source[len("file:"):]
        protocol = _resolve_protocol(source, n, None, kappa, half_shift, readout_phase, orthonormalize)
        cfg = search_config_from_manifest(read_manifest(path))
        value = evaluate_protocol(protocol, cfg, split=HOLDOUT_SPLIT)
        logger.info("held-out re-evaluation of %s: %.6g Hz^2", path, value)
        manifest = RunManifest(
            subcommand="simulate",
            config={**cfg.to_dict(), "protocol": source, "holdout": True},
            master_seed=cfg.master_seed,
        ).with_artifacts(output)
        _write_json({"manifest": manifest.to_dict(), "protocol": protocol.to_dict(), "holdout_hz2": value}, output)
        return

    if source == "squeezed" and kappa is None and not optimize_kappa:
        raise click.BadParameter("squeezed requires --kappa or --optimize-kappa", param_hint="--kappa")

    refined = None
    if optimize_kappa or (refine and source in BUILTIN_PROTOCOLS):
        if n is None:
            raise click.BadParameter("required for builtin protocols", param_hint="--n")
        if source not in BUILTIN_PROTOCOLS:
            raise click.BadParameter("--optimize-kappa needs --protocol squeezed", param_hint="--optimize-kappa")
        options = {"half_shift": half_shift} if source == "buzek" else {}
        if source == "squeezed" and kappa is not None:
            options["kappa"] = kappa
        refined = refine_known(source, n, _search_config(ctx, n, seed), **options)
        protocol = refined.protocol
    else:
        protocol = _resolve_protocol(source, n, t, kappa, half_shift, readout_phase, orthonormalize)
        if refine:
            cfg = _search_config(ctx, protocol.n, seed)
            refined = refine_protocol(protocol, cfg, scan_T=t is None)
            protocol = refined.protocol

    report, run = run_simulation(
        protocol, cycles, seed,
        block_size=config.simulation.block_size,
        burn_in_blocks=config.simulation.burn_in_blocks,
        oversample=config.noise.oversample,
    )

    manifest = RunManifest(
        subcommand="simulate",
        config={**config.to_dict(), "protocol": source, "cycles": cycles, "refine": bool(refined)},
        master_seed=seed,
    ).with_artifacts(output, dump_cycles, save_protocol)

    if dump_cycles:
        run.to_csv(dump_cycles, header=manifest.to_header())
    if save_protocol:
        write_protocol(protocol, save_protocol, manifest=manifest.to_dict())

    data = {"manifest": manifest.to_dict(), "report": report.to_dict(), "protocol": protocol.to_dict()}
    if refined is not None:
        data["refinement"] = {"objective_hz2": refined.objective, "holdout_hz2": refined.holdout}
    _write_json(data, output)


@main.command()
@click.option("--families", default="ramsey,ghz,squeezed,buzek", show_default=True,
              help="Comma-separated protocol families")
@click.option("--n-min", type=click.IntRange(1, 20), default=1, show_default=True)
@click.option("--n-max", type=click.IntRange(1, 20), default=8, show_default=True)
@click.option("--cycles", type=click.IntRange(min=1), help="Probe cycles (default from config)")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True, help="Sweep CSV")
@click.pass_context
def sweep(ctx, families, n_min, n_max, cycles, seed, output):
    """Refine protocol families for each qubit count and compare with the SQL."""
    from qclock.search import refine_known
    from qclock.simulator import sql_variance_at_1s

    names = [f.strip() for f in families.split(",") if f.strip()]
    unknown = [f for f in names if f not in BUILTIN_PROTOCOLS]
    if unknown:
        raise click.BadParameter(f"unknown families: {', '.join(unknown)}", param_hint="--families")
    if n_min > n_max:
        raise click.BadParameter(f"--n-min {n_min} exceeds --n-max {n_max}", param_hint="--n-min")

    overrides = {"cycles": cycles} if cycles else {}
    # Ramsey at one qubit defines the SQL; N uncorrelated qubits divide it by N
    ramsey = refine_known("ramsey", 1, _search_config(ctx, 1, seed, **overrides))
    reference = ramsey.holdout
    if not ramsey.provenance.get("holdout_consistent", True):
        reference = ramsey.objective
        logger.warning("refined Ramsey n=1 is inconsistent on held-out seeds (%.5g vs %.5g Hz^2); "
                       "using the optimization-seed value as SQL reference", ramsey.holdout, ramsey.objective)
    logger.info("SQL reference (refined Ramsey, n=1): %.5g Hz^2", reference)

    rows = []
    for n in range(n_min, n_max + 1):
        cfg = _search_config(ctx, n, seed, **overrides)
        sql = reference / n
        for family in names:
            logger.info("sweep n=%d %s", n, family)
            try:
                result = refine_known(family, n, cfg)
            except ValueError as e:
                logger.info("sweep n=%d %s failed: %s", n, family, e)
                rows.append([n, family, "", "", "", _fmt(sql), "", "", str(e)])
                continue
            p = result.protocol
            rows.append([
                n, family, _fmt(p.probe_period), _fmt(p.kappa), _fmt(result.holdout),
                _fmt(sql), _fmt(result.holdout / sql),
                _fmt(sql_variance_at_1s(n, p.probe_period)), "",
            ])

    manifest = RunManifest(
        subcommand="sweep",
        config={**ctx.obj.to_dict(), "families": names, "n_min": n_min, "n_max": n_max,
                "cycles": cycles or ctx.obj.simulation.cycles, "sql_reference_hz2": reference},
        master_seed=seed,
    ).with_artifacts(output)
    _write_csv(output, manifest,
               ["n", "family", "T_s", "kappa", "variance_at_1s", "sql_variance", "sql_ratio",
                "projection_noise_variance", "error"],
               rows)


@main.command()
@protocol_options
@click.option("--points", type=click.IntRange(min=1), default=1001, show_default=True)
@click.option("--phi-min", type=float, default=-np.pi, help="Grid start, radians [default: -pi]")
@click.option("--phi-max", type=float, default=np.pi, help="Grid end, radians [default: pi]")
@click.option("--output", "-o", type=click.Path(dir_okay=False), required=True, help="Curves CSV")
@click.pass_context
def curves(ctx, source, n, t, kappa, half_shift, readout_phase, orthonormalize,
           points, phi_min, phi_max, output):
    """Dump outcome probabilities p_j(phi) and each outcome's phase estimate."""
    from qclock.simulator import probability_curves

    if source == "squeezed" and kappa is None:
        raise click.BadParameter("squeezed requires --kappa", param_hint="--kappa")
    protocol = _resolve_protocol(source, n, t, kappa, half_shift, readout_phase, orthonormalize)
    phis = np.linspace(phi_min, phi_max, points)
    probs = probability_curves(protocol, phis)
    estimates = [_fmt(float(x)) for x in protocol.phase_estimates()]

    size = protocol.n + 1
    header = ["phi"] + [f"p_{j}" for j in range(size)] + [f"phi_est_{j}" for j in range(size)]
    rows = [[_fmt(float(phi))] + [_fmt(float(p)) for p in row] + estimates
            for phi, row in zip(phis, probs)]

    manifest = RunManifest(
        subcommand="curves",
        config={"protocol": source, "n": protocol.n, "T_seconds": protocol.probe_period,
                "points": points, "phi_min": phi_min, "phi_max": phi_max},
    ).with_artifacts(output)
    _write_csv(output, manifest, header, rows)


@main.command("noise-check")
@click.option("--cycles", type=click.IntRange(min=2), default=1_000_000, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--tau", "taus", type=click.IntRange(min=1), multiple=True,
              help="Averaging times in cycles [default: 1, 10, 100]")
@click.option("--output", "-o", type=click.Path(dir_okay=False), help="Report JSON (default stdout)")
@click.option("--trace-out", type=click.Path(dir_okay=False), help="Write the trace as CSV")
@click.pass_context
def noise_check(ctx, cycles, seed, taus, output, trace_out):
    """Generate a flicker trace and tabulate its Allan deviation."""
    from qclock.noise import allan_report, generate_flicker

    taus = taus or (1, 10, 100)
    trace = generate_flicker(cycles, seed, oversample=ctx.obj.noise.oversample)
    report = allan_report(trace, taus)

    manifest = RunManifest(
        subcommand="noise-check",
        config={**ctx.obj.to_dict(), "cycles": cycles, "taus": sorted(set(taus))},
        master_seed=seed,
    ).with_artifacts(output, trace_out)
    if trace_out:
        trace.to_csv(trace_out, header=manifest.to_header())
    _write_json({"manifest": manifest.to_dict(), "report": report.to_dict()}, output)


@main.command()
@click.option("--n", "n", type=click.IntRange(2, 8), required=True, help="Qubit count")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--restarts", type=click.IntRange(min=1), help="Random restarts (default from config)")
@click.option("--workers", type=click.IntRange(min=0), help="Worker processes, 0 = all cores")
@click.option("--cycles", type=click.IntRange(min=1), help="Cycles per objective evaluation")
@click.option("--screen-cycles", type=click.IntRange(min=1), help="Cycles per screening evaluation")
@click.option("--replicas", type=click.IntRange(min=1), help="Noise traces per evaluation")
@click.option("--max-iterations", type=click.IntRange(min=0), help="Nelder-Mead iteration cap")
@click.option("--threshold", type=float, help="Screening threshold, Hz^2 (default: from refined Ramsey)")
@click.option("--warm-start", type=click.Choice(BUILTIN_PROTOCOLS),
              help="Polish a refined builtin protocol instead of random restarts")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Resumable JSON-lines checkpoint")
@click.option("--output", "-o", type=click.Path(dir_okay=False), help="Result JSON (default stdout)")
@click.option("--protocol-out", type=click.Path(dir_okay=False), help="Winner protocol JSON")
@click.pass_context
def search(ctx, n, seed, restarts, workers, cycles, screen_cycles, replicas, max_iterations,
           threshold, warm_start, checkpoint, output, protocol_out):
    """Search all protocol parameters for the lowest instability."""
    from qclock.protocols import save_protocol
    from qclock.search import random_restart_search, refine_known, warm_start_search

    cfg = _search_config(
        ctx, n, seed, restarts=restarts, workers=workers, cycles=cycles, screen_cycles=screen_cycles,
        replicas=replicas, max_iterations=max_iterations, threshold=threshold,
    )
    if warm_start:
        result = warm_start_search(refine_known(warm_start, n, cfg).protocol, cfg)
    else:
        result = random_restart_search(n, cfg, checkpoint=checkpoint)

    resolved = cfg.to_dict()
    resolved["warm_start"] = warm_start
    manifest = RunManifest(subcommand="search", config=resolved, master_seed=seed) \
        .with_artifacts(output, protocol_out, checkpoint)
    if protocol_out:
        save_protocol(result.protocol, protocol_out, manifest=manifest.to_dict())
    _write_json({"manifest": manifest.to_dict(), "result": result.to_dict()}, output)


@main.command("config")
@click.option("--init", "init", is_flag=True, help="Write the default configuration file")
@click.option("--force", is_flag=True, help="Overwrite an existing file with --init")
@click.pass_context
def config_cmd(ctx, init, force):
    """Show the resolved configuration, or write the default file."""
    path: Path = ctx.meta["config_path"]
    if init:
        if path.exists() and not force:
            click.echo(click.style(f"{path} already exists", fg="yellow") + " (use --force to overwrite)")
            raise SystemExit(1)
        Config().save(path)
        click.echo(click.style("✓ ", fg="green") + "Configuration saved!")
        click.echo(f"  Config file: {path}")
        return

    config: Config = ctx.obj
    click.echo(click.style("qclock configuration", bold=True))
    click.echo("─" * 30)
    click.echo(f"Config: {path}" + ("" if path.exists() else " (not found, using defaults)"))
    click.echo()
    click.echo(yaml.dump(config.to_dict(), default_flow_style=False, sort_keys=False).rstrip())
    click.echo()

    errors = config.validate()
    if errors:
        click.echo(click.style("Issues:", fg="yellow"))
        for error in errors:
            click.echo(f"  ⚠ {error}")
    else:
        click.echo(click.style("✓ Valid", fg="green"))


if __name__ == "__main__":
    main()
