"""
Command implementations behind cli.py.

cmd_train, cmd_sample, cmd_eval and cmd_posviz are the single steps; cmd_sweep
and cmd_ablate chain them into the max-position sweep and the component
ablation (base -> +Cond-Aug -> +attention scale -> +timestep shift).
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from sources import checkpoint, posenc, rpe2d
from sources.config import diffusion_schedule, load_config, load_config_text, model_config, override, pe_config
from sources.data_eval import ManifestEntry, SyntheticSpec, evaluate, load_corpus, save_image, write_manifest
from sources.diffusion import Sampler
from sources.errors import InputError
from sources.logger import Logger
from sources.model import DiT
from sources.schemas import EvalReport, RunConfig
from sources.trainer import Trainer
from sources.utility import pretty_print, timer_decorator

REPORT_FILE = "report.tsv"
POSITIONS_FILE = "positions.txt"
SWEEP_VALUES = (32, 64, 128, 256)

logger = Logger("commands.log")


def cmd_train(config_path: str, overrides: Optional[Dict[str, object]] = None, progress: bool = True) -> str:
    cfg = load_config(config_path)
    if overrides:
        cfg = override(cfg, overrides)
    return train_run(cfg, progress=progress)


def train_run(cfg: RunConfig, progress: bool = True) -> str:
    pretty_print(f"Training {cfg.pe.strategy}/{cfg.rpe.variant} for {cfg.train.steps} steps "
                 f"into {cfg.train.out_dir}", color="status")
    last = Trainer(cfg, progress=progress).train()
    logger.info(f"train finished: {last}")
    pretty_print(f"Last checkpoint: {last}", color="success")
    return last


def load_model(checkpoint_path: str):
    ckpt = checkpoint.load_checkpoint(checkpoint_path)
    cfg = load_config_text(ckpt.config_text)
    model = DiT(model_config(cfg))
    checkpoint.restore_parameters(model, ckpt)
    model.eval()
    return model, cfg


def describe_layout(cfg: RunConfig, h_test: int) -> str:
    """Positions and frequency bases the model uses on an h_test x h_test patch grid."""
    pe = pe_config(cfg, h_test, h_test)
    flat = pe.strategy == "rpe2d" and pe.variant == "naive"
    layout = posenc.flat_strategy_positions(pe) if flat else posenc.strategy_grid(pe)
    base_x, base_y = posenc.strategy_bases(pe, d_rot=model_config(cfg).rotary_dim(flat))
    return (f"strategy {pe.strategy} form {pe.form} variant {pe.variant}\n"
            f"train {pe.h_train}x{pe.w_train} test {pe.h_test}x{pe.w_test}\n"
            f"bases {base_x!r} {base_y!r}\n" + layout.describe())


def cmd_sample(checkpoint_path: str, resolution: int, count: int, out_dir: str, seed: int = 0,
               cfg_scale: float = 4.0, use_shift: bool = False, use_attn_scale: bool = False,
               steps: int = 250, method: str = "ancestral", classes: Optional[Sequence[int]] = None,
               batch_size: int = 16) -> List[ManifestEntry]:
    """
    Sample `count` images per class at `resolution`. Images are named by seed,
    class and index; the position layout goes into positions.txt and the
    list of images into the manifest.
    """
    model, cfg = load_model(checkpoint_path)
    p = cfg.model.patch_size
    if resolution % p:
        raise InputError(f"resolution {resolution} is not divisible by patch size {p}")
    h_test = resolution // p
    pe_config(cfg, h_test, h_test)
    classes = list(classes if classes is not None else cfg.data.classes)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, POSITIONS_FILE), "w", encoding="utf-8") as f:
        f.write(describe_layout(cfg, h_test))
    sampler = Sampler(model, diffusion_schedule(cfg), steps=steps, method=method)
    generator = torch.Generator().manual_seed(seed)
    labels = [c for c in classes for _ in range(count)]
    extension = "pgm" if cfg.model.channels == 1 else "ppm"
    entries = []
    pretty_print(f"Sampling {len(labels)} images at {resolution}x{resolution} "
                 f"(shift={use_shift}, attn_scale={use_attn_scale}, cfg={cfg_scale})", color="status")
    for start in range(0, len(labels), batch_size):
        chunk = labels[start:start + batch_size]
        images = sampler.sample((len(chunk), cfg.model.channels, resolution, resolution),
                                torch.tensor(chunk, dtype=torch.long), generator, guidance_scale=cfg_scale,
                                use_shift=use_shift, use_attn_scale=use_attn_scale)
        for offset, (class_id, image) in enumerate(zip(chunk, images.numpy())):
            index = start + offset
            name = f"seed{seed}_{index:05d}_class{class_id}.{extension}"
            save_image(image, os.path.join(out_dir, name))
            entries.append(ManifestEntry(name, class_id, seed))
    write_manifest(out_dir, entries)
    logger.info(f"sampled {len(entries)} images into {out_dir} from {checkpoint_path}")
    return entries


def cmd_eval(sample_dir: str, report_path: Optional[str] = None) -> EvalReport:
    corpus = load_corpus(sample_dir)
    channels = int(next(iter(corpus.values()))[0].shape[0])
    spec = SyntheticSpec(classes=tuple(sorted(corpus)), channels=channels)
    report = evaluate(corpus, spec)
    report_path = report_path or os.path.join(sample_dir, REPORT_FILE)
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report.to_tsv())
    logger.info(f"evaluated {sample_dir}: {report}")
    return report


def render_positions(positions: rpe2d.Positions, max_h: int, max_w: int) -> np.ndarray:
    """max_h x max_w occupancy mask of the positions (flat positions folded row-major)."""
    mask = np.zeros((max_h, max_w), dtype=bool)
    if isinstance(positions, rpe2d.FlatPositions):
        for p in positions.positions:
            mask[(p - 1) // max_w, (p - 1) % max_w] = True
    else:
        for x in positions.xs:
            for y in positions.ys:
                mask[int(round(x)) - 1, int(round(y)) - 1] = True
    return mask


def cmd_posviz(variant: str, h: int, w: int, max_h: int, max_w: int, seed: int = 0, test: bool = False,
               out_path: Optional[str] = None) -> str:
    """Dot-grid rendering of one sampled (or test-time) layout, optionally also as a PGM."""
    if test:
        positions = rpe2d.inference_positions(variant, h, w, max_h, max_w)
    else:
        positions = rpe2d.sample_positions(variant, h, w, max_h, max_w, rpe2d.make_rng(seed))
    mask = render_positions(positions, max_h, max_w)
    text = positions.describe() + "\n".join("".join("#" if v else "." for v in row) for row in mask) + "\n"
    if out_path:
        Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(out_path, format="PPM")
    return text


def sample_and_eval(checkpoint_path: str, cfg: RunConfig, out_dir: str, use_shift: bool,
                    use_attn_scale: bool) -> EvalReport:
    s = cfg.sample
    cmd_sample(checkpoint_path, s.resolution, s.count, out_dir, seed=s.seed, cfg_scale=s.cfg_scale,
               use_shift=use_shift, use_attn_scale=use_attn_scale, steps=s.steps, method=s.sampler)
    return cmd_eval(out_dir)


@timer_decorator
def cmd_sweep(config_path: str, out_dir: str, values: Sequence[int] = SWEEP_VALUES,
              progress: bool = True) -> Dict[int, EvalReport]:
    """Train, sample and evaluate once per maximum position H = W."""
    base = load_config(config_path)
    reports = {}
    for value in values:
        run_dir = os.path.join(out_dir, f"H{value}")
        cfg = override(base, {"rpe.max_h": value, "rpe.max_w": value, "train.out_dir": run_dir})
        last = train_run(cfg, progress=progress)
        reports[value] = sample_and_eval(last, cfg, os.path.join(run_dir, "samples"),
                                         cfg.sample.shift, cfg.sample.attn_scale)
    with open(os.path.join(out_dir, "sweep.tsv"), "w", encoding="utf-8") as f:
        f.write("max_position\tspectral_error\tw1\tcombined\n")
        for value, report in reports.items():
            f.write(f"{value}\t{_fmt(report.mean_spectral_error)}\t{report.mean_w1:.6f}\t"
                    f"{report.combined_score:.6f}\n")
    return reports


@dataclass
class AblationResult:
    reports: Dict[str, EvalReport] = field(default_factory=dict)
    rpe2d_beats_ext: bool = False
    improving_components: int = 0

    @property
    def directional(self) -> bool:
        return self.rpe2d_beats_ext and self.improving_components >= 2


ABLATION_STEPS = ("base", "+cond_aug", "+attn_scale", "+shift")


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6f}"


def ablation_verdict(reports: Dict[str, EvalReport]) -> AblationResult:
    ext, full = reports["ext"], reports["+shift"]
    beats = (ext.mean_spectral_error is not None and full.mean_spectral_error is not None
             and full.mean_spectral_error < ext.mean_spectral_error and full.mean_w1 < ext.mean_w1)
    scores = [reports[name].combined_score for name in ABLATION_STEPS]
    improving = sum(after < before for before, after in zip(scores, scores[1:]))
    return AblationResult(reports=reports, rpe2d_beats_ext=beats, improving_components=improving)


@timer_decorator
def cmd_ablate(config_path: str, out_dir: str, progress: bool = True) -> AblationResult:
    """
    ext baseline, then rpe2d with components added one at a time. Three
    trainings (ext, rpe2d base, rpe2d + Cond-Aug); the last one is sampled
    three times with the inference corrections switched on in turn.
    """
    base = load_config(config_path)
    plain = {"aug.enabled": False, "cond.micro": False}
    trainings = {
        "ext": {"pe.strategy": "ext", **plain},
        "base": {"pe.strategy": "rpe2d", **plain},
        "cond_aug": {"pe.strategy": "rpe2d", "aug.enabled": True, "cond.micro": True},
    }
    checkpoints, configs = {}, {}
    for name, changes in trainings.items():
        cfg = override(base, {**changes, "train.out_dir": os.path.join(out_dir, name)})
        checkpoints[name], configs[name] = train_run(cfg, progress=progress), cfg
    plan = [
        ("ext", "ext", False, False),
        ("base", "base", False, False),
        ("+cond_aug", "cond_aug", False, False),
        ("+attn_scale", "cond_aug", False, True),
        ("+shift", "cond_aug", True, True),
    ]
    reports = {}
    for setting, run, use_shift, use_attn in plan:
        sample_dir = os.path.join(out_dir, "samples", setting.lstrip("+"))
        reports[setting] = sample_and_eval(checkpoints[run], configs[run], sample_dir, use_shift, use_attn)
    result = ablation_verdict(reports)
    with open(os.path.join(out_dir, "ablation.tsv"), "w", encoding="utf-8") as f:
        f.write("setting\tspectral_error\tw1\tcombined\n")
        for setting, report in reports.items():
            f.write(f"{setting}\t{_fmt(report.mean_spectral_error)}\t{report.mean_w1:.6f}\t"
                    f"{report.combined_score:.6f}\n")
        f.write(f"# rpe2d_beats_ext={result.rpe2d_beats_ext} improving_components={result.improving_components}/3 "
                f"directional={result.directional}\n")
    logger.info(f"ablation in {out_dir}: beats_ext={result.rpe2d_beats_ext} "
                f"improving={result.improving_components}")
    return result
