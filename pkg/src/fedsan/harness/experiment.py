"""End-to-end experiment runner with per-round checkpoints and resume."""

import dataclasses
import os
import statistics
import subprocess

import torch

from .. import data_pipeline as dp
from .. import fl_orchestrator as fl
from .. import harmless_stage as hs
from ..model_zoo import build_model
from .config import config_text


@dataclasses.dataclass
class CostRecord:
    """Per-round cost: wall seconds split by phase, and the parameter count
    of whatever model the server optimized against (the memory proxy)."""

    round: int
    client_time_s: float
    server_time_s: float
    opt_params: int
    flops: float = None

    def __post_init__(self):
        assert self.client_time_s >= 0 and self.server_time_s >= 0


def _code_version():
    here = os.path.dirname(__file__)
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    try:
        from importlib.metadata import version

        return "v" + version("fedsan")
    except Exception:
        return "unknown"


def _ckpt_path(out_dir, r):
    return os.path.join(out_dir, "checkpoints", f"round_{r:03d}.pt")


def _latest_checkpoint(out_dir, rounds):
    for r in range(rounds, 0, -1):
        p = _ckpt_path(out_dir, r)
        if os.path.exists(p):
            return r, p
    return 0, None


def _build_world(cfg, arm):
    split = dp.load_dataset(cfg.dataset, root=cfg.data_root, seed=cfg.seed)
    part = dp.partition_data(split, cfg.num_clients, scheme=cfg.scheme,
                             alpha=cfg.dirichlet_alpha,
                             defense_fraction=cfg.defense_fraction,
                             seed=cfg.seed)
    dx = split.train_x[part.defense_indices]
    dy = split.train_y[part.defense_indices]
    if arm == "vanilla":
        clients = fl.setup_vanilla_clients(split, part, cfg)
    else:
        clients = fl.setup_clients(split, part, cfg)
    return split, clients, dx, dy


def run_experiment(rc, resume=True, quiet=False):
    """Run one arm end to end; returns the run directory.

    Every round is checkpointed (server state + reports), so a killed run
    restarts from its last finished round.  All randomness is derived from
    (seed, purpose, round) keys, never from ambient RNG state, which is what
    makes the resumed trajectory match the uninterrupted one exactly.
    """
    cfg, arm = rc.fl, rc.arm
    out = rc.out_dir
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write(config_text(rc))
        fh.write(f"code_version {_code_version()}\n")

    split, clients, dx, dy = _build_world(cfg, arm)
    start, ckpt = _latest_checkpoint(out, cfg.rounds) if resume else (0, None)
    if ckpt is not None:
        server = torch.load(ckpt, weights_only=False)["server"]
        if not quiet:
            print(f"resuming from round {start}")
    else:
        server = fl.init_server(cfg, split, dx, dy)

    for r in range(start, cfg.rounds):
        try:
            rep = fl.run_round(server, clients, split, dx, dy, cfg, arm)
        except Exception as e:
            last = _ckpt_path(out, r) if r else "none"
            raise RuntimeError(
                f"round {r} failed ({e}); resume from checkpoint '{last}'"
            ) from e
        torch.save({"server": server, "round": r + 1}, _ckpt_path(out, r + 1))
        if not quiet:
            print(f"r{rep.round:03d} {arm} acc {rep.acc:.3f} "
                  f"wdr {rep.mean_wdr:.2f} asr {rep.mean_asr:.2f} "
                  f"server {rep.server_time_s:.2f}s")

    final = _finalize(server, clients, split, dx, dy, cfg, arm)
    final["reports"] = server.reports
    final["arm"] = arm
    torch.save(final, os.path.join(out, "final.pt"))
    return out


def _finalize(server, clients, split, dx, dy, cfg, arm):
    """Post-FL stage: detection + env binding + relearn for defense arms,
    plain final metrics otherwise."""
    g = build_model(cfg.arch, split.image_shape, split.num_classes, seed=cfg.seed)
    g.load_state_dict(server.global_params)
    g.model.eval()
    ex, ey = split.test_x[: cfg.eval_samples], split.test_y[: cfg.eval_samples]
    out = {"global_params": server.global_params, "acc": fl._accuracy(g, ex, ey)}
    if arm == "vanilla":
        return out
    out["planted"] = {c.client_id: c.trigger for c in clients}
    out["natural_flip"] = {
        c.client_id: fl._flip_rate(g, ex, ey, c.trigger, c.trigger.target_class)
        for c in clients}
    if fl.arm_toggles(arm) is None:  # without_sanitizer: nothing to recover
        return out

    ests = [fl.finalize_detection(server, k) for k in range(cfg.num_clients)]
    envs = dp.build_harmless_env(cfg.num_clients, split.image_shape,
                                 palette_seed=cfg.seed,
                                 min_distance=cfg.env_min_distance,
                                 estimates=ests)
    records = [hs.WatermarkRecord(k, ests[k], envs[k])
               for k in range(cfg.num_clients)]
    relearned = hs.harmless_relearn(
        g, records, dx, dy, epochs=cfg.relearn_epochs, lr=cfg.relearn_lr,
        batch_size=cfg.relearn_batch, alpha=cfg.relearn_alpha,
        beta=cfg.relearn_beta, seed=cfg.seed, shift_aug=cfg.relearn_shift)
    ev = hs.evaluate_model(relearned, clients, records, ex, ey,
                           n_queries=cfg.n_queries, sigma=cfg.sigma,
                           jitter=cfg.jitter, seed=cfg.seed)
    out.update(records=records, eval=ev, acc=ev.acc,
               relearned_params=relearned.state_dict(),
               detected={e.client_id: e.detected for e in ests},
               subnet_plans={k: server.subnets[k][0] for k in server.subnets})
    return out


def measure_cost(run_dir=None, reports=None, warmup=2):
    """CostRecord series for a finished run (or a report list), plus the
    median server seconds used in the efficiency comparisons."""
    if reports is None:
        final = torch.load(os.path.join(run_dir, "final.pt"), weights_only=False)
        reports = final["reports"]
    records = [CostRecord(r.round, r.client_time_s, r.server_time_s,
                          r.subnet_params) for r in reports]
    tail = [c.server_time_s for c in records[warmup:]] or [0.0]
    return records, statistics.median(tail)
