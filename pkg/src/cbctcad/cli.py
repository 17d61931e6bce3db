"""Command-line entry point.

Exit codes: 0 on success, 1 on usage errors, 2 when a processing stage fails.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .denoise import Denoiser, TrainConfig, denoise_volume, train_denoiser
from .diagnosis import (
    FitConfig,
    diagnose,
    key_substack,
    load_models,
    occlusion_saliency,
    saliency_peak,
    save_models,
    split_sides,
    train_selector,
    train_side_classifier,
)
from .errors import CBCTError
from .fdk import WINDOWS, fdk_reconstruct
from .geometry import ConeBeamGeometry, Volume
from .harness import ExperimentConfig, compare_arms, load_report, run_experiment
from .io import load_projections, load_volume, save_projections, save_volume
from .phantom import DiagnosisLabel, generate_case
from .projector import forward_project

EXIT_USAGE = 1
EXIT_STAGE = 2


class _Group(click.Group):
    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.exceptions.Abort:
            click.echo("aborted", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except (CBCTError, OSError, ValueError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_STAGE)
        sys.exit(rv if isinstance(rv, int) else 0)


def _triple(ctx, param, value):
    if value is None:
        return None
    try:
        parts = [int(p) for p in value.split(",")]
    except ValueError:
        raise click.BadParameter("expected X,Y,Z integers")
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise click.BadParameter("expected X,Y,Z integers")
    return tuple(parts)


def _geometry(path) -> ConeBeamGeometry:
    return ConeBeamGeometry.load(path) if path else ConeBeamGeometry()


@click.group(cls=_Group)
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Pseudo-CBCT synthesis, denoising and sinus diagnosis on phantoms."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--left", type=click.Choice([l.name for l in DiagnosisLabel], case_sensitive=False), default="HC", show_default=True)
@click.option("--right", type=click.Choice([l.name for l in DiagnosisLabel], case_sensitive=False), default="HC", show_default=True)
@click.option("--dims", callback=_triple, default="64,64,64", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Output volume (.raw + .json sidecar).")
def phantom(seed, left, right, dims, out):
    """Generate one labelled head phantom."""
    case = generate_case(seed, left, right, dims)
    save_volume(case.volume, out, case.metadata())
    click.echo(f"{case.case_id}: left={case.left_label.name} right={case.right_label.name} key slices {case.key_slice_range}")


@cli.command()
@click.option("--in", "src", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--geom", type=click.Path(exists=True, dir_okay=False), help="Geometry JSON (default geometry if omitted).")
@click.option("--noise-sigma", type=float, default=0.0, show_default=True, help="Additive Gaussian noise on line integrals.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def project(src, geom, noise_sigma, seed, out):
    """Cone-beam forward projection of a volume."""
    vol, _ = load_volume(src)
    proj = forward_project(vol, _geometry(geom), noise_sigma=noise_sigma, seed=seed)
    save_projections(proj, out)
    click.echo(f"{proj.geometry.n_views} views of {proj.views.shape[1]}x{proj.views.shape[2]} written")


@cli.command()
@click.option("--proj", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--geom", type=click.Path(exists=True, dir_okay=False), help="Override the geometry stored with the projections.")
@click.option("--dims", callback=_triple, default="64,64,64", show_default=True)
@click.option("--spacing", type=float, default=None, help="Voxel size in mm (default 192 mm / dims).")
@click.option("--window", type=click.Choice(WINDOWS), default="hann", show_default=True)
@click.option("--parker/--uniform", default=False, show_default=True, help="Half-scan weighting.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def reconstruct(proj, geom, dims, spacing, window, parker, out):
    """FDK reconstruction of a projection stack."""
    p = load_projections(proj)
    if geom:
        p = type(p)(ConeBeamGeometry.load(geom), p.views)
    sp = (spacing,) * 3 if spacing else tuple(192.0 / n for n in dims)
    vol = fdk_reconstruct(p, dims, sp, window=window, parker=parker)
    save_volume(vol, out)
    click.echo(f"reconstructed {dims} volume")


def _read_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    return json.loads(path.read_text()), path.parent


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


@cli.command("train-denoiser")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True,
              help='JSON: {"pairs": [{"noisy": vol, "clean": vol}, ...], "slices": [optional indices]}.')
@click.option("--epochs", type=int, default=TrainConfig.epochs, show_default=True)
@click.option("--lr", type=float, default=TrainConfig.lr, show_default=True)
@click.option("--batch-size", type=int, default=TrainConfig.batch_size, show_default=True)
@click.option("--channels", type=int, default=TrainConfig.channels, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def train_denoiser_cmd(manifest, epochs, lr, batch_size, channels, seed, out):
    """Train the learned denoiser on coronal slices of volume pairs."""
    m, base = _read_manifest(manifest)
    pairs = []
    for entry in m["pairs"]:
        noisy, _ = load_volume(_resolve(base, entry["noisy"]))
        clean, _ = load_volume(_resolve(base, entry["clean"]))
        js = m.get("slices") or range(noisy.dims[1])
        pairs += [(noisy.data[:, j, :], clean.data[:, j, :]) for j in js]
    d = train_denoiser(pairs, TrainConfig(epochs, lr, batch_size, seed, channels))
    d.save(out)
    meta = d.training_meta
    click.echo(f"trained on {meta['n_pairs']} slices: loss {meta['initial_loss']:.3g} -> {meta['final_loss']:.3g}")


@cli.command()
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--in", "src", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def denoise(weights, src, out):
    """Apply a saved denoiser slice by slice."""
    d = Denoiser.load(weights)
    vol, meta = load_volume(src)
    save_volume(denoise_volume(d, vol), out, {k: v for k, v in meta.items() if k not in ("dims", "spacing", "origin")})
    click.echo(f"denoised with {d.kind} model")


def _label_of(entry: dict, meta: dict, side: str) -> DiagnosisLabel:
    value = entry.get(side, meta.get(f"{side}_label"))
    if value is None:
        raise KeyError(f"no {side} label for {entry['volume']}")
    return DiagnosisLabel[str(value).upper()]


@cli.command("train-diagnosis")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True,
              help='JSON: {"cases": [{"volume": path, "key_slice_range": [lo, hi], "left": "HC", "right": "MFB"}]}; '
                   "missing fields are read from the volume sidecar.")
@click.option("--iterations", type=int, default=FitConfig.iterations, show_default=True)
@click.option("--lr", type=float, default=FitConfig.lr, show_default=True)
@click.option("--l2", type=float, default=FitConfig.l2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def train_diagnosis(manifest, iterations, lr, l2, seed, out):
    """Train the key-slice selector and the side classifier."""
    m, base = _read_manifest(manifest)
    fit = FitConfig(iterations, lr, l2, seed)
    vols, sides = [], []
    for entry in m["cases"]:
        vol, meta = load_volume(_resolve(base, entry["volume"]))
        ksr = tuple(entry.get("key_slice_range", meta.get("key_slice_range")))
        vols.append((vol, ksr))
        left, right = split_sides(key_substack(vol, ksr))
        sides += [(left, _label_of(entry, meta, "left")), (right, _label_of(entry, meta, "right"))]
    selector = train_selector(vols, fit)
    classifier = train_side_classifier(sides, fit)
    save_models(out, selector, classifier, {"cases": len(vols), "seed": seed})
    click.echo(f"trained on {len(vols)} cases (selector threshold {selector.threshold:.2f})")


@cli.command("diagnose")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--in", "src", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--report", type=click.Path(dir_okay=False), required=True)
@click.option("--saliency-out", type=click.Path(dir_okay=False), help="Write occlusion maps as <path>_left/_right volumes.")
@click.option("--patch", type=int, default=8, show_default=True)
def diagnose_cmd(weights, src, report, saliency_out, patch):
    """Diagnose both maxillary sinuses of one volume."""
    selector, classifier, header = load_models(weights)
    vol, _ = load_volume(src)
    dx = diagnose(selector, classifier, vol, weights_version=f"v{header['version']}")
    out = dx.to_dict()
    if saliency_out:
        base = Path(saliency_out)
        base = base.with_suffix("") if base.suffix in (".raw", ".json") else base
        paths, peaks = {}, {}
        for side, half in zip(("left", "right"), split_sides(key_substack(vol, dx.interval))):
            size = tuple(min(patch, n) for n in half.dims)
            sal = occlusion_saliency(classifier, half, size)
            p = base.parent / f"{base.name}_{side}"
            save_volume(half.with_data(sal.astype(np.float32)), p)
            paths[side] = str(p.with_suffix(".raw"))
            peaks[side] = list(saliency_peak(sal))
        out["saliency_maps"] = paths
        out["saliency_peaks"] = peaks
    Path(report).parent.mkdir(parents=True, exist_ok=True)
    Path(report).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    click.echo(f"left={dx.left_label.name} right={dx.right_label.name} slices {dx.interval[0]}-{dx.interval[1]}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Flat JSON config.")
@click.option("--output-dir", type=click.Path(file_okay=False), help="Override the config's output_dir.")
def experiment(config_path, output_dir):
    """Run the cross-validated baseline-versus-proposed experiment."""
    cfg = json.loads(Path(config_path).read_text()) if config_path else {}
    if output_dir:
        cfg["output_dir"] = output_dir
    config = ExperimentConfig.from_dict(cfg)
    baseline, proposed = run_experiment(config)
    _print_table(compare_arms(baseline, proposed))
    click.echo(f"reports written to {config.resolved_output_dir()}")


def _print_table(table: dict):
    for name in ("accuracy", "micro_auc", "macro_auc", "macro_f1", "psnr", "ssim"):
        row = table[name]
        click.echo(f"{name:<12} baseline {row['baseline']:.4f}  proposed {row['formatted']}")


@cli.command()
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
def report(run_dir):
    """Print the arm comparison stored in a finished run."""
    baseline, proposed, data = load_report(Path(run_dir) / "report.json")
    _print_table(compare_arms(baseline, proposed))
    audit = data.get("split_audit", {})
    click.echo(f"split audit: {'passed' if audit.get('passed') else 'FAILED'}")


def main(argv=None):
    cli.main(args=argv, prog_name="cbctcad")


if __name__ == "__main__":
    main()
