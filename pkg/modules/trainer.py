"""
Multi-domain in-context training loop and the finite-difference gradient
check that guards the differentiation contract.
"""

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from modules.errors import ContractError
from modules.mpm_model import chamfer_terms
from modules.tokenizer import patchify_pair, to_tensors

logger = logging.getLogger("Trainer")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    learning_rate: float


# ==============================
# DATA
# ==============================
def patch_sources(sources, config):
    """{(domain index, task): [PairPatches]} for every source training pair."""
    table = {}
    for i, ds in enumerate(sources):
        if len(ds) == 0:
            raise ContractError(f"source domain '{ds.name}' has no samples")
        for task in ds.tasks:
            table[(i, task)] = [
                patchify_pair(p.input, p.target, config.patch_count, config.patch_size)
                for p in ds.pairs_for(task)
            ]
    return table


def pick_prompt(rng, table, domain, task, sample, n_domains):
    """A prompt pair for the same task from another domain (j != i) when one exists."""
    others = [j for j in range(n_domains) if j != domain and (j, task) in table]
    if others:
        j = others[int(rng.integers(len(others)))]
        return table[(j, task)][int(rng.integers(len(table[(j, task)])))]
    pool = table[(domain, task)]
    if len(pool) == 1:
        return pool[0]
    pick = int(rng.integers(len(pool) - 1))
    return pool[pick + 1 if pick >= sample else pick]


# ==============================
# TRAINING
# ==============================
def train(model, sources, config):
    config.validate()
    if not sources:
        raise ContractError("training needs at least one source domain")
    if len(sources) < 2:
        logger.warning("⚠️ Only one source domain: prompts are paired within the same domain")

    table = patch_sources(sources, config)
    queries = [(i, task, s) for (i, task), pool in sorted(table.items()) for s in range(len(pool))]
    steps_per_epoch = math.ceil(len(queries) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs

    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(total_steps, 1))

    logger.info(
        f"🚀 Training on {len(sources)} domains, {len(queries)} query pairs, "
        f"{config.epochs} epochs x {steps_per_epoch} steps"
    )
    model.train()
    history = []
    for epoch in range(config.epochs):
        lr = optimizer.param_groups[0]["lr"]
        order = rng.permutation(len(queries))
        total, count = 0.0, 0
        for step in range(steps_per_epoch):
            batch = [queries[q] for q in order[step * config.batch_size:(step + 1) * config.batch_size]]
            q_list = [table[(i, task)][s] for i, task, s in batch]
            p_list = [pick_prompt(rng, table, i, task, s, len(sources)) for i, task, s in batch]
            mask_seed = int(rng.integers(2 ** 31))

            optimizer.zero_grad()
            loss, *_ = model.training_step(
                to_tensors(q_list, dtype=model.dtype),
                to_tensors(p_list, dtype=model.dtype),
                mask_seed,
            )
            loss.backward()
            optimizer.step()
            scheduler.step()

            total += loss.item() * len(batch)
            count += len(batch)
        record = EpochRecord(epoch=epoch, mean_loss=total / count, learning_rate=lr)
        history.append(record)
        logger.info(f"📉 Epoch {epoch + 1}/{config.epochs} loss={record.mean_loss:.6f} lr={lr:.2e}")

    model.eval()
    logger.info(f"✅ Training finished, final loss {history[-1].mean_loss:.6f}")
    return model, history


# ==============================
# GRADIENT CHECK
# ==============================
def _signature(model, query, prompt, mask_seed):
    """Loss plus every discrete choice made on the way (max-pool winners and
    Chamfer nearest neighbours)."""
    with torch.no_grad():
        value, pred, gt, segments = model.training_step(query, prompt, mask_seed)
        _, (idx_p, idx_g) = chamfer_terms(pred, gt)
    return value.item(), [s.pool_index for s in segments] + [idx_p, idx_g]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def gradient_check(model, sample_batch, epsilon=1e-5, n_params=200, seed=0, mask_seed=0):
    """Max relative error between autograd and central finite differences.

    Probes whose +/- epsilon step flips a discrete choice are redrawn; there the
    loss is not differentiable inside the probe interval."""
    m = copy.deepcopy(model).double()
    query, prompt = (tuple(t.double() for t in part) for part in sample_batch)

    m.zero_grad()
    m.training_step(query, prompt, mask_seed)[0].backward()
    params = [p for p in m.parameters() if p.requires_grad]
    grads = [p.grad.detach().clone().reshape(-1) for p in params]
    sizes = np.array([p.numel() for p in params])
    _, base = _signature(m, query, prompt, mask_seed)

    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    while checked < n_params and skipped < 20 * n_params:
        flat = int(rng.integers(sizes.sum()))
        which = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        idx = flat - int(sizes[:which].sum())
        view = params[which].data.reshape(-1)
        original = view[idx].item()

        view[idx] = original + epsilon
        f_plus, sig_plus = _signature(m, query, prompt, mask_seed)
        view[idx] = original - epsilon
        f_minus, sig_minus = _signature(m, query, prompt, mask_seed)
        view[idx] = original

        if not (_same(sig_plus, base) and _same(sig_minus, base)):
            skipped += 1
            continue
        analytic = grads[which][idx].item()
        numeric = (f_plus - f_minus) / (2 * epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
        checked += 1

    logger.info(f"🔬 Gradient check: {checked} parameters, {skipped} redrawn, max rel err {worst:.2e}")
    return worst
