"""Report emission: metrics.csv, trigger gallery, scaling plot.

Everything is rendered from the persisted run artifacts, never from live
objects, so re-emitting a report is idempotent: same run directory, byte
identical CSV.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from .config import parse_pairs
from .experiment import _latest_checkpoint, measure_cost

CSV_COLUMNS = ("round", "arm", "acc", "mean_wdr", "mean_asr",
               "server_time_s", "client_time_s", "subnet_params")


def _load_run(run_dir):
    """(manifest dict, reports, final-or-None).  Falls back to the newest
    checkpoint when the run never finished."""
    with open(os.path.join(run_dir, "manifest.txt")) as fh:
        manifest = dict(parse_pairs(fh.read()))
    fpath = os.path.join(run_dir, "final.pt")
    if os.path.exists(fpath):
        final = torch.load(fpath, weights_only=False)
        return manifest, final["reports"], final
    rounds = int(manifest.get("fl.rounds", 0))
    _, ckpt = _latest_checkpoint(run_dir, rounds)
    if ckpt is None:
        raise FileNotFoundError(f"no final.pt or checkpoints under '{run_dir}'")
    return manifest, torch.load(ckpt, weights_only=False)["server"].reports, None


def write_metrics_csv(run_dir, reports, arm):
    path = os.path.join(run_dir, "metrics.csv")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in reports:
            fh.write(f"{r.round},{arm},{r.acc:.6f},{r.mean_wdr:.6f},"
                     f"{r.mean_asr:.6f},{r.server_time_s:.6f},"
                     f"{r.client_time_s:.6f},{r.subnet_params}\n")
    return path


def _panel(ax, img, title):
    img = img.detach()
    if img.dim() == 3 and img.shape[0] in (1, 3):
        img = img.permute(1, 2, 0)
    img = img.squeeze(-1) if img.dim() == 3 and img.shape[-1] == 1 else img
    ax.imshow(img.numpy(), cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def write_gallery(run_dir, final):
    """One (planted, recovered, env) triple per client under triggers/."""
    gal = os.path.join(run_dir, "triggers")
    os.makedirs(gal, exist_ok=True)
    paths = []
    for rec in final["records"]:
        k = rec.client_id
        spec = final["planted"][k]
        est = rec.estimate
        fig, axes = plt.subplots(1, 3, figsize=(6, 2.2))
        _panel(axes[0], spec.mask * spec.pattern,
               f"planted -> {spec.target_class}")
        _panel(axes[1], est.mask * est.pattern,
               f"recovered -> {est.target_class}")
        _panel(axes[2], rec.env.background, f"env client {k}")
        fig.tight_layout()
        p = os.path.join(gal, f"client_{k}.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths


def write_summary(run_dir, manifest, final, partial):
    path = os.path.join(run_dir, "summary.txt")
    with open(path, "w") as fh:
        if partial:
            fh.write("status PARTIAL (no final evaluation; metrics up to last "
                     "checkpoint)\n")
            return path
        fh.write("status complete\n")
        fh.write(f"arm {final['arm']}\n")
        fh.write(f"acc {final['acc']:.4f}\n")
        if "natural_flip" in final:
            for k, v in sorted(final["natural_flip"].items()):
                fh.write(f"natural_flip.{k} {v:.4f}\n")
        ev = final.get("eval")
        if ev is not None:
            for k in sorted(ev.wdr):
                fh.write(f"wdr.{k} {ev.wdr[k]:.4f}\n")
            for k in sorted(ev.asr):
                fh.write(f"asr.{k} {ev.asr[k]:.4f}\n")
            for k in sorted(ev.background_rate):
                fh.write(f"background_rate.{k} {ev.background_rate[k]:.4f}\n")
            for k in sorted(ev.verified):
                fh.write(f"verified.{k} {ev.verified[k]}\n")
            for k, v in sorted(final["detected"].items()):
                fh.write(f"detected.{k} {v}\n")
    return path


def emit_report(run_dir, quiet=False):
    """Render metrics.csv + summary (+ gallery for defense arms)."""
    manifest, reports, final = _load_run(run_dir)
    partial = final is None
    arm = final["arm"] if final else manifest.get("arm", "?")
    out = [write_metrics_csv(run_dir, reports, arm)]
    out.append(write_summary(run_dir, manifest, final, partial))
    if final is not None and "records" in final:
        out.extend(write_gallery(run_dir, final))
    if partial and not quiet:
        print(f"warning: partial report for '{run_dir}' (run not finished)")
    return out


def emit_scaling(base_dir, out_png=None):
    """Total server time vs client count, one curve per arm, over the run
    directories found directly under `base_dir`."""
    series = {}
    for name in sorted(os.listdir(base_dir)):
        rd = os.path.join(base_dir, name)
        if not os.path.isfile(os.path.join(rd, "manifest.txt")):
            continue
        manifest, reports, final = _load_run(rd)
        k = int(manifest["fl.num_clients"])
        arm = final["arm"] if final else manifest.get("arm", "?")
        total = sum(r.server_time_s for r in reports)
        series.setdefault(arm, {})[k] = total
    if not series:
        raise FileNotFoundError(f"no run directories under '{base_dir}'")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for arm, pts in sorted(series.items()):
        ks = sorted(pts)
        ax.plot(ks, [pts[k] for k in ks], marker="o", label=arm)
    ax.set_xlabel("clients")
    ax.set_ylabel("total server time (s)")
    ax.set_xticks(sorted({k for pts in series.values() for k in pts}))
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_png = out_png or os.path.join(base_dir, "scaling.png")
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png, series
