"""
Test-time domain generalization engine.

Source prototypes are estimated once from a frozen checkpoint (a local (M, C)
matrix and a global C-vector per source domain). At test time a query's patch
tokens are compared with them, shifted towards them according to a
ShiftMode, and fed with the nearest source prompt into the frozen model.

Feature matrices are token-major: f_local is (M, C).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from modules.checkpoint import checkpoint_hash
from modules.errors import ContractError, NumericError, StalenessError
from modules.geometry import farthest_point_sample, resize_cyclic
from modules.mpm_model import global_feature
from modules.tokenizer import patchify_cloud, patchify_pair

logger = logging.getLogger("DGEngine")

SHIFT_MODES = (
    "none",
    "random-average-one",
    "global-only-average-one",
    "local-only-average-one",
    "dual-average-one",
    "dual-average-all",
    "macro-only",
    "micro-only",
    "full",
)

ABLATION_LABELS = {
    "none": "No shift",
    "random-average-one": "Model A",
    "global-only-average-one": "Model B",
    "local-only-average-one": "Model C",
    "dual-average-one": "Model D",
    "dual-average-all": "Model E",
    "macro-only": "Model F",
    "micro-only": "Model G",
    "full": "Full",
}

PROTOTYPE_SCOPES = ("per-task", "per-domain")
PROMPT_SELECTIONS = ("nearest", "random")


# ==============================
# TYPES
# ==============================
@dataclass
class DomainPrototype:
    domain_name: str
    task: str              # "" when pooled over every task of the domain
    z_global: np.ndarray   # (C,)
    z_local: np.ndarray    # (M, C)
    sample_count: int


@dataclass
class DistanceProfile:
    e_global: np.ndarray   # (R,)
    e_local: np.ndarray    # (R, M)


@dataclass
class ShiftCoefficients:
    alpha: np.ndarray      # (R,)
    beta: np.ndarray       # (R, M)
    lam: float = 0.5


@dataclass
class BankEntry:
    domain: str
    task: str
    sample_id: int
    f_global: np.ndarray   # (C,)
    f_local: np.ndarray    # (M, C)


@dataclass
class PromptBank:
    checkpoint_hash: bytes
    entries: list = field(default_factory=list)

    def entries_for(self, domain, task):
        return sorted(
            (e for e in self.entries if e.domain == domain and e.task == task),
            key=lambda e: e.sample_id,
        )

    def entries_for_task(self, task):
        return sorted((e for e in self.entries if e.task == task), key=lambda e: e.sample_id)


# ==============================
# SOURCE FEATURES
# ==============================
def encode_clouds(model, clouds, batch_size=64):
    """Patch tokens F(P_m) of each cloud, stacked to (N, M, C)."""
    cfg = model.config
    out = []
    with torch.no_grad():
        for start in range(0, len(clouds), batch_size):
            patches = [patchify_cloud(c, cfg.patch_count, cfg.patch_size) for c in clouds[start:start + batch_size]]
            centers = torch.as_tensor(np.stack([p.centers for p in patches]), dtype=model.dtype)
            points = torch.as_tensor(
                np.stack([p.points(c) for p, c in zip(patches, clouds[start:start + batch_size])]),
                dtype=model.dtype,
            )
            out.append(model.embed_patches(centers, points).tokens.cpu().numpy())
    return np.concatenate(out, axis=0)


def encode_sources(sources, model):
    """{(domain, task): (sample_ids, (N, M, C) features)} over training inputs."""
    features = {}
    for ds in sources:
        if len(ds) == 0:
            raise ContractError(f"source domain '{ds.name}' is empty")
        for task in ds.tasks:
            pairs = ds.pairs_for(task)
            features[(ds.name, task)] = (
                [p.sample_id for p in pairs],
                encode_clouds(model, [p.input for p in pairs]),
            )
    return features


def prototype_from_features(domain, task, local_features):
    """Mean patch tokens (local) and mean of per-sample max-pooled tokens (global)."""
    feats = np.asarray(local_features)
    if feats.ndim != 3 or feats.shape[0] == 0:
        raise ContractError(f"domain '{domain}' has no samples to average")
    acc = feats.astype(np.float64)
    return DomainPrototype(
        domain_name=domain,
        task=task,
        z_global=global_feature(acc).mean(axis=0).astype(feats.dtype),
        z_local=acc.mean(axis=0).astype(feats.dtype),
        sample_count=int(feats.shape[0]),
    )


def estimate_prototypes(sources, model, scope="per-task", features=None):
    if scope not in PROTOTYPE_SCOPES:
        raise ContractError(f"unknown prototype scope '{scope}', expected one of {PROTOTYPE_SCOPES}")
    features = features if features is not None else encode_sources(sources, model)
    prototypes = []
    for ds in sources:
        if len(ds) == 0:
            raise ContractError(f"source domain '{ds.name}' is empty")
        if scope == "per-task":
            for task in ds.tasks:
                prototypes.append(prototype_from_features(ds.name, task, features[(ds.name, task)][1]))
        else:
            pooled = np.concatenate([features[(ds.name, t)][1] for t in ds.tasks], axis=0)
            prototypes.append(prototype_from_features(ds.name, "", pooled))
    logger.info(f"🧭 Estimated {len(prototypes)} prototypes ({scope}) from {len(sources)} source domains")
    return prototypes


def build_prompt_bank(sources, model, features=None):
    features = features if features is not None else encode_sources(sources, model)
    bank = PromptBank(checkpoint_hash=checkpoint_hash(model))
    for (domain, task), (ids, feats) in sorted(features.items()):
        for sample_id, f in zip(ids, feats):
            bank.entries.append(BankEntry(domain, task, int(sample_id), global_feature(f), f))
    return bank


def estimate_source_state(sources, model, scope="per-task"):
    """Prototypes and prompt bank from a single encoding pass."""
    features = encode_sources(sources, model)
    return estimate_prototypes(sources, model, scope, features), build_prompt_bank(sources, model, features)


# ==============================
# DISTANCES & COEFFICIENTS
# ==============================
def distance_profile(f_global, f_local, prototypes):
    if not prototypes:
        raise ContractError("no prototypes to compare against")
    z_g = np.stack([p.z_global for p in prototypes]).astype(np.float64)
    z_l = np.stack([p.z_local for p in prototypes]).astype(np.float64)
    f_g = np.asarray(f_global, dtype=np.float64)
    f_l = np.asarray(f_local, dtype=np.float64)
    if f_g.shape != z_g.shape[1:] or f_l.shape != z_l.shape[1:]:
        raise ContractError(
            f"features {f_g.shape}/{f_l.shape} do not match prototypes {z_g.shape[1:]}/{z_l.shape[1:]}"
        )
    return DistanceProfile(
        e_global=np.linalg.norm(f_g[None, :] - z_g, axis=1),
        e_local=np.linalg.norm(f_l[None, :, :] - z_l, axis=2),
    )


def softmax(values):
    x = np.asarray(values, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError(f"softmax over non-finite values {x}")
    e = np.exp(x - x.max())
    return e / e.sum()


def macro_coefficients(e_global, negate=False):
    e = np.asarray(e_global, dtype=np.float64)
    return softmax(-e if negate else e)


def micro_coefficients(e_local_row, negate=False):
    e = np.asarray(e_local_row, dtype=np.float64)
    return softmax(-e if negate else e)


def compute_coefficients(profile, lam=0.5, negate=False):
    return ShiftCoefficients(
        alpha=macro_coefficients(profile.e_global, negate),
        beta=np.stack([micro_coefficients(row, negate) for row in profile.e_local]),
        lam=lam,
    )


def coefficient_mass(coeffs):
    """Per-patch total weight the full mode puts on F and the prototypes."""
    a = coeffs.alpha[:, None]
    return (a * coeffs.beta + (1 - a) * (1 - coeffs.beta)).mean(axis=0)


# ==============================
# SELECTION
# ==============================
def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")


def blended_distances(profile, lam=0.5):
    _check_lambda(lam)
    return lam * profile.e_global + (1.0 - lam) * profile.e_local.mean(axis=1)


def select_source_domain(profile, lam=0.5):
    # argmin keeps the first minimum: smallest index wins ties
    return int(np.argmin(blended_distances(profile, lam)))


def select_prompt(f_global, f_local, bank, domain, task, lam=0.5):
    _check_lambda(lam)
    entries = bank.entries_for(domain, task)
    if not entries:
        raise ContractError(f"prompt bank has no samples for domain '{domain}', task '{task}'")
    f_g = np.asarray(f_global, dtype=np.float64)
    f_l = np.asarray(f_local, dtype=np.float64)
    g = np.stack([e.f_global for e in entries]).astype(np.float64)
    loc = np.stack([e.f_local for e in entries]).astype(np.float64)
    dist = lam * np.linalg.norm(g - f_g, axis=1) + (1 - lam) * np.linalg.norm(loc - f_l, axis=2).mean(axis=1)
    return entries[int(np.argmin(dist))].sample_id


def random_prompt(bank, task, seed):
    entries = bank.entries_for_task(task)
    if not entries:
        raise ContractError(f"prompt bank has no samples for task '{task}'")
    return entries[int(np.random.default_rng(seed).integers(len(entries)))].sample_id


# ==============================
# FEATURE SHIFTING
# ==============================
def _anchor(mode, profile, lam):
    if profile is None:
        raise ContractError(f"mode '{mode}' needs the distance profile to pick its anchor")
    if mode == "global-only-average-one":
        return int(np.argmin(profile.e_global))
    if mode == "local-only-average-one":
        return int(np.argmin(profile.e_local.mean(axis=1)))
    return select_source_domain(profile, lam)


def shift_features(f_local, prototypes, coeffs, mode, seed=0, profile=None):
    if mode not in SHIFT_MODES:
        raise ContractError(f"unknown shift mode '{mode}', expected one of {SHIFT_MODES}")
    if mode == "none":
        return np.array(f_local, copy=True)

    F = np.asarray(f_local, dtype=np.float64)
    Z = np.stack([p.z_local for p in prototypes]).astype(np.float64)  # (R, M, C)
    R = Z.shape[0]
    if coeffs.alpha.shape != (R,) or coeffs.beta.shape != Z.shape[:2]:
        raise ContractError("shift coefficients do not match the prototypes")

    if mode == "random-average-one":
        r = int(np.random.default_rng(seed).integers(R))
        out = (F + Z[r]) / 2.0
    elif mode in ("global-only-average-one", "local-only-average-one", "dual-average-one"):
        out = (F + Z[_anchor(mode, profile, coeffs.lam)]) / 2.0
    elif mode == "dual-average-all":
        out = ((F[None] + Z) / 2.0).mean(axis=0)
    elif mode == "macro-only":
        a = coeffs.alpha[:, None, None]
        out = (a * F[None] + (1 - a) * Z).mean(axis=0)
    else:
        a = np.full((R, 1, 1), 1.0 / R) if mode == "micro-only" else coeffs.alpha[:, None, None]
        b = coeffs.beta[:, :, None]
        out = (a * b * F[None] + (1 - a) * (1 - b) * Z).mean(axis=0)
    return out.astype(np.asarray(f_local).dtype)


# ==============================
# INFERENCE
# ==============================
@dataclass
class InferenceTrace:
    domain: str
    prompt_id: int
    profile: DistanceProfile
    coeffs: ShiftCoefficients
    sequence: object  # masked TokenMatrix fed to the transformer


def pairs_by_id(datasets):
    return {p.sample_id: p for ds in datasets for p in ds.all_pairs()}


class DGInferenceEngine:
    def __init__(self, model, prototypes, bank, pairs, lam=0.5, negate_distances=False,
                 prompt_selection="nearest", n_points=1024):
        if checkpoint_hash(model) != bank.checkpoint_hash:
            raise StalenessError("prototype store was estimated from a different checkpoint")
        if prompt_selection not in PROMPT_SELECTIONS:
            raise ContractError(f"unknown prompt selection '{prompt_selection}'")
        _check_lambda(lam)
        self.model = model.eval()
        self.prototypes = prototypes
        self.bank = bank
        self.pairs = pairs
        self.lam = lam
        self.negate_distances = negate_distances
        self.prompt_selection = prompt_selection
        self.n_points = n_points
        self.scope = "per-domain" if all(p.task == "" for p in prototypes) else "per-task"

    def prototypes_for(self, task):
        key = "" if self.scope == "per-domain" else task
        protos = [p for p in self.prototypes if p.task == key]
        if not protos:
            raise ContractError(f"no prototypes for task '{task}'")
        return protos

    def _tensor(self, array):
        return torch.as_tensor(np.asarray(array), dtype=self.model.dtype).unsqueeze(0)

    def _prompt(self, task, f_global, f_local, domain, seed):
        if self.prompt_selection == "random":
            return random_prompt(self.bank, task, seed)
        return select_prompt(f_global, f_local, self.bank, domain, task, self.lam)

    def infer(self, test_input, task, mode="full", seed=0, return_trace=False):
        cfg = self.model.config
        with torch.no_grad():
            patches = patchify_cloud(test_input, cfg.patch_count, cfg.patch_size)
            centers = self._tensor(patches.centers)
            q_in = self.model.embed_patches(centers, self._tensor(patches.points(test_input)))
            f_local = q_in.tokens[0].cpu().numpy()
            f_global = global_feature(f_local)

            protos = self.prototypes_for(task)
            profile = distance_profile(f_global, f_local, protos)
            coeffs = compute_coefficients(profile, self.lam, self.negate_distances)
            if mode != "none":
                shifted = shift_features(f_local, protos, coeffs, mode, seed, profile)
                q_in = q_in.with_tokens(self._tensor(shifted))
            if mode == "full":
                logger.debug(f"coefficient mass per patch: {coefficient_mass(coeffs).round(4).tolist()}")

            domain = protos[select_source_domain(profile, self.lam)].domain_name
            prompt_id = self._prompt(task, f_global, f_local, domain, seed)
            prompt = self.pairs[prompt_id]
            pp = patchify_pair(prompt.input, prompt.target, cfg.patch_count, cfg.patch_size)
            p_in, p_tgt = self.model.encode_pair(
                self._tensor(pp.centers), self._tensor(pp.input_points), self._tensor(pp.target_points), "prompt"
            )
            pred, seq = self.model.predict(q_in, centers, p_in, p_tgt)

        points = pred[0].reshape(-1, 3).cpu().numpy().astype(np.float64)
        if points.shape[0] > self.n_points:
            points = points[farthest_point_sample(points, self.n_points, 0)]
        elif points.shape[0] < self.n_points:
            points = resize_cyclic(points, self.n_points)
        if return_trace:
            return points, InferenceTrace(domain, prompt_id, profile, coeffs, seq)
        return points

    def copy_prompt(self, test_input, task, seed=0):
        """The ICL baseline: the selected prompt's target is the prediction."""
        _, trace = self.infer(test_input, task, mode="none", seed=seed, return_trace=True)
        return np.asarray(self.pairs[trace.prompt_id].target, dtype=np.float64)


def infer(test_input, task, model, prototypes, bank, mode, pairs, seed=0, **engine_kwargs):
    """One-shot inference; build a DGInferenceEngine to serve many queries."""
    return DGInferenceEngine(model, prototypes, bank, pairs, **engine_kwargs).infer(test_input, task, mode, seed)
