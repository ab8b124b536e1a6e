"""Post-aggregation relearning and black-box contribution verification.

After federated training ends, every client's recovered trigger is unbound
from natural inputs (stamped defense images relearn their true labels) and
bound to that client's harmless environment background.  Verification then
stamps the recorded trigger onto jittered copies of the environment and
checks the target-class response rate against a threshold.
"""

import dataclasses
import warnings

import torch
import torch.nn.functional as F

from . import data_pipeline as dp
from .rng import derive_seed, torch_gen


@dataclasses.dataclass
class WatermarkRecord:
    """Server-held verification artifact for one client."""

    client_id: int
    estimate: object  # sanitizer_core.TriggerEstimate
    env: dp.HarmlessEnv


@dataclasses.dataclass
class EvalReport:
    acc: float
    wdr: dict  # client_id -> recorded-trigger response rate in own env
    wdr_planted: dict  # client_id -> planted-trigger response rate in own env
    asr: dict  # client_id -> planted-trigger flip rate on natural inputs
    background_rate: dict  # client_id -> bare-env target rate
    verified: dict  # client_id -> bool

    def mean_wdr(self, ids=None):
        vals = [v for k, v in self.wdr.items() if ids is None or k in ids]
        return float(sum(vals) / len(vals)) if vals else 0.0

    def mean_asr(self, ids=None):
        vals = [v for k, v in self.asr.items() if ids is None or k in ids]
        return float(sum(vals) / len(vals)) if vals else 0.0


def query_model(adapter, x):
    """Deterministic black-box label queries (first maximum wins ties)."""
    adapter.model.eval()
    with torch.no_grad():
        logits = adapter(x if x.dim() == 4 else x.unsqueeze(0))
        return logits.argmax(1)


def harmless_relearn(adapter, records, defense_x, defense_y, epochs=50, lr=0.005,
                     batch_size=64, alpha=0.8, beta=0.2, seed=0, momentum=0.9,
                     clean_mix=True, jitter=4.0 / 255.0, shift_aug=2,
                     bare_weight=0.65):
    """Finetune so each recovered trigger answers only inside its own env.

    Per step: a defense batch stamped with the clients' recovered triggers
    keeps its true labels (unbinding), while env backgrounds stamped with
    their own triggers map to the detected targets (binding).  All clients'
    records are mixed into every epoch.  Returns a new adapter.

    clean_mix folds the unstamped defense batch into the clean term; without
    it every training input carries a trigger and clean accuracy decays.  The
    binding term also pins each bare background to whatever the model called
    it before relearning (steered off the target class if they collide), so
    the environment alone stays inert and only env+trigger verifies.  Both
    env terms train on pixel-jittered copies covering the verification query
    distribution (defaults to twice the query magnitude for margin);
    anchoring the single exact tensor leaves its neighborhood free to drift
    to the target.

    shift_aug rolls each defense batch by a random offset up to that many
    pixels.  The defense set is tiny next to the federation's data; epochs of
    plain finetuning on it drag the model back toward a defense-only fit and
    shed several points of test accuracy, which the translations prevent.

    bare_weight splits the env term between the bare anchor and the binding.
    A flat background sits in no class's natural basin, and once clean
    accuracy recovers the nearest basin can be the target itself; an even
    split sometimes lets the binding pull the bare env along with it.
    """
    work = adapter.clone()
    if not records:
        warnings.warn("harmless_relearn: no records, returning params unchanged")
        return work
    work.model.train()
    opt = torch.optim.SGD(work.parameters(), lr=lr, momentum=momentum)
    envs = torch.stack([r.env.background for r in records])
    masks = torch.stack([r.estimate.mask for r in records]).unsqueeze(1)
    pats = torch.stack([r.estimate.pattern for r in records])
    env_y = torch.as_tensor([r.estimate.target_class for r in records])
    with torch.no_grad():
        logits = adapter(envs)
        bare_y = logits.argmax(1)
        for i in range(len(records)):
            if int(bare_y[i]) == int(env_y[i]):
                bare_y[i] = logits[i].topk(2).indices[1]
    n = len(defense_x)
    for ep in range(epochs):
        perm = torch.randperm(n, generator=torch_gen(seed, "relearn", ep))
        gen = torch_gen(seed, "relearn_env", ep)
        for bi, i in enumerate(range(0, n, batch_size)):
            s = perm[i : i + batch_size]
            bx, by = defense_x[s], defense_y[s]
            if shift_aug:
                sh = torch.randint(-shift_aug, shift_aug + 1, (2,), generator=gen)
                bx = torch.roll(bx, (int(sh[0]), int(sh[1])), dims=(2, 3))
            rec = records[(ep + bi) % len(records)]
            xd = dp.stamp(bx, rec.estimate.mask, rec.estimate.pattern)
            if clean_mix:
                xd = torch.cat([xd, bx])
                yd = torch.cat([by, by])
            else:
                yd = by
            loss = alpha * F.cross_entropy(work(xd), yd)
            if beta > 0.0:
                noise = (torch.rand(envs.shape, generator=gen) * 2.0 - 1.0) * jitter
                bare = (envs + noise).clamp(0.0, 1.0)
                stamped = (1.0 - masks) * bare + masks * pats
                loss = loss + beta * (
                    (1.0 - bare_weight) * F.cross_entropy(work(stamped), env_y)
                    + bare_weight * F.cross_entropy(work(bare), bare_y))
            opt.zero_grad()
            loss.backward()
            opt.step()
    work.model.eval()
    return work


def verify_contribution(adapter, record, n_queries=256, sigma=0.95,
                        jitter=2.0 / 255.0, seed=0):
    """Black-box check that the recorded trigger fires in the client's env.

    Stamps the record's trigger onto `n_queries` jittered copies of the env
    background; returns (verified, response_rate) with verified <=> rate >
    sigma.
    """
    q = dp.jitter_queries(record.env.background, n_queries, magnitude=jitter,
                          seed=derive_seed(seed, "verify", record.client_id))
    stamped = dp.stamp(q, record.estimate.mask, record.estimate.pattern)
    preds = query_model(adapter, stamped)
    rate = float((preds == record.estimate.target_class).float().mean())
    return rate > sigma, rate


def evaluate_model(adapter, clients, records, test_x, test_y, n_queries=256,
                   sigma=0.95, jitter=2.0 / 255.0, seed=0):
    """Full post-training evaluation: accuracy, per-client env response rates
    (recorded and planted trigger), natural-input attack rates, and bare-env
    nullity."""
    adapter.model.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, len(test_x), 512):
            hits += int((adapter(test_x[i : i + 512]).argmax(1) == test_y[i : i + 512]).sum())
    acc = hits / max(1, len(test_y))

    by_id = {r.client_id: r for r in records}
    wdr, wdrp, asr, bg, verified = {}, {}, {}, {}, {}
    for c in clients:
        rec = by_id.get(c.client_id)
        if rec is None:
            continue
        k = c.client_id
        ok, rate = verify_contribution(adapter, rec, n_queries=n_queries,
                                       sigma=sigma, jitter=jitter, seed=seed)
        wdr[k], verified[k] = rate, ok
        q = dp.jitter_queries(rec.env.background, n_queries, magnitude=jitter,
                              seed=derive_seed(seed, "verify", k))
        if c.trigger is not None:
            stamped = dp.stamp(q, c.trigger.mask, c.trigger.pattern)
            preds = query_model(adapter, stamped)
            wdrp[k] = float((preds == c.trigger.target_class).float().mean())
            keep = test_y != c.trigger.target_class
            xs = dp.stamp(test_x[keep], c.trigger.mask, c.trigger.pattern)
            preds = query_model(adapter, xs)
            asr[k] = float((preds == c.trigger.target_class).float().mean())
        bare = query_model(adapter, q)
        bg[k] = float((bare == rec.estimate.target_class).float().mean())
    return EvalReport(acc=acc, wdr=wdr, wdr_planted=wdrp, asr=asr,
                      background_rate=bg, verified=verified)
