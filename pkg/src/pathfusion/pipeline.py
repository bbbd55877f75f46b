"""Two-stage training orchestration, cross-validation, and gradient checks.

Stage I fits the multi-modal teacher with the task loss on the combined
representation, auxiliary subspace-head losses (coordinated by the
confidence-guided gradient projection), and the cross-scale diagonal-variance
loss. Stage II warms up the slide-only student on the task loss, then
distills the frozen teacher's softened predictions and concatenated subspace
features into it. All entry points are bit-reproducible given (config, seed).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch

from .aggregator import SlideStudent, cluster_tokens
from .checkpoint import (
    STAGE_DISTILLED,
    STAGE_TEACHER,
    STAGE_WARMUP,
    Checkpoint,
)
from .config import RunConfig
from .consistency import AttentionRecord, cross_scale_similarity, dev_loss
from .data import Cohort
from .distill import prediction_kl, representation_mse
from .fusion import FusionBranch, MultiModalTeacher, subspace_parameter_names
from .gradcoord import ConfidencePair, build_bundle, confidence_scores, coordinate, unpack_bundle
from .ingest import AccessAudit, select_hvgs
from .metrics import EvalReport, classification_metrics, cluster_overlap, concordance_index
from .objectives import (
    ce_loss,
    cumulative_hazard_risk,
    survival_confidence,
    survival_nll,
    task_output_width,
)


class PipelineError(RuntimeError):
    pass


# Disjoint seed streams; every consumer derives its own generator from these
# tags so stages cannot perturb each other's randomness.
_SEED_FOLDS = 90001
_SEED_TEACHER_INIT = 1
_SEED_STUDENT_INIT = 2
_SEED_TEACHER_BATCH = 11
_SEED_STUDENT_BATCH = 12


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _rng(*parts: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(parts))))


@dataclass
class FoldSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


def make_folds(case_ids: list[str], n_folds: int, seed: int, val_fraction: float) -> list[FoldSplit]:
    """Deterministic shuffled k-fold split with a validation share per fold."""
    if n_folds < 2 or n_folds > len(case_ids):
        raise PipelineError(f"cannot split {len(case_ids)} cases into {n_folds} folds")
    perm = _rng(seed, _SEED_FOLDS).permutation(len(case_ids))
    chunks = np.array_split(perm, n_folds)
    folds = []
    for f in range(n_folds):
        rest = np.concatenate([chunks[g] for g in range(n_folds) if g != f])
        n_val = max(1, int(round(val_fraction * len(rest))))
        folds.append(
            FoldSplit(
                train_ids=[case_ids[i] for i in rest[n_val:]],
                val_ids=[case_ids[i] for i in rest[:n_val]],
                test_ids=[case_ids[i] for i in chunks[f]],
            )
        )
    return folds


def _case_lookup(cohort: Cohort) -> dict[str, int]:
    return {case.case_id: i for i, case in enumerate(cohort.cases)}


def fit_preprocessing(cohort: Cohort, train_ids: list[str], cfg: RunConfig, audit: AccessAudit) -> dict:
    """HVG selection, gene partitioning, and z-score moments on training cases only."""
    lookup = _case_lookup(cohort)
    rows = [lookup[cid] for cid in train_ids]
    expr = cohort.expression_matrix()[rows]
    audit.log("fit_hvg", case_ids=sorted(train_ids))
    hvg = select_hvgs(expr, cfg.hvg_fraction)
    tumor_set = {int(i) for i in cohort.tumor_idx}
    tme_set = {int(i) for i in cohort.tme_idx}
    tumor_genes = [int(g) for g in hvg if int(g) in tumor_set]
    tme_genes = [int(g) for g in hvg if int(g) in tme_set]
    if not tumor_genes or not tme_genes:
        raise PipelineError("HVG selection left a gene subset empty; lower the fraction or fix the geneset")
    audit.log("fit_zscore", case_ids=sorted(train_ids))
    prep = {"hvg_idx": [int(g) for g in hvg], "tumor_genes": tumor_genes, "tme_genes": tme_genes}
    for tag, genes in (("tumor", tumor_genes), ("tme", tme_genes)):
        sub = expr[:, genes]
        prep[f"{tag}_mean"] = [float(v) for v in sub.mean(axis=0)]
        prep[f"{tag}_std"] = [float(v) for v in np.maximum(sub.std(axis=0), 1e-8)]
    return prep


def _slide_tensors(cohort: Cohort, ids: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
    lookup = _case_lookup(cohort)
    g10 = np.stack([cohort.cases[lookup[c]].grid10.data for c in ids])
    g20 = np.stack([cohort.cases[lookup[c]].grid20.data for c in ids])
    return torch.from_numpy(g10).float(), torch.from_numpy(g20).float()


def _gene_tensors(cohort: Cohort, ids: list[str], prep: dict) -> tuple[torch.Tensor, torch.Tensor]:
    lookup = _case_lookup(cohort)
    expr = np.stack([cohort.full_expression(cohort.cases[lookup[c]]) for c in ids]).astype(np.float64)
    out = []
    for tag in ("tumor", "tme"):
        genes = prep[f"{tag}_genes"]
        mean = np.asarray(prep[f"{tag}_mean"])
        std = np.asarray(prep[f"{tag}_std"])
        out.append(torch.from_numpy((expr[:, genes] - mean) / std).float())
    return out[0], out[1]


@dataclass
class _Targets:
    labels: torch.Tensor | None = None
    bins: torch.Tensor | None = None
    censored: torch.Tensor | None = None
    times: np.ndarray | None = None
    events: np.ndarray | None = None


def _build_targets(cohort: Cohort, ids: list[str], task: str) -> _Targets:
    lookup = _case_lookup(cohort)
    cases = [cohort.cases[lookup[c]] for c in ids]
    if task == "survival":
        return _Targets(
            bins=torch.tensor([c.surv_bin for c in cases], dtype=torch.long),
            censored=torch.tensor([c.censored for c in cases], dtype=torch.bool),
            times=np.array([c.surv_time for c in cases]),
            events=np.array([not c.censored for c in cases], dtype=bool),
        )
    attr = "diagnosis" if task == "diagnosis" else "grade"
    return _Targets(labels=torch.tensor([getattr(c, attr) for c in cases], dtype=torch.long))


def _task_loss(task: str, logits: torch.Tensor, tgt: _Targets, idx: torch.Tensor) -> torch.Tensor:
    if task == "survival":
        return survival_nll(logits, tgt.bins[idx], tgt.censored[idx])
    return ce_loss(logits, tgt.labels[idx])


def _confidences(task: str, aux_t: torch.Tensor, aux_e: torch.Tensor, tgt: _Targets, idx: torch.Tensor) -> ConfidencePair:
    if task == "survival":
        with torch.no_grad():
            s_t = survival_confidence(aux_t, tgt.bins[idx], tgt.censored[idx]).sum()
            s_e = survival_confidence(aux_e, tgt.bins[idx], tgt.censored[idx]).sum()
        return ConfidencePair(s_t=float(s_t), s_e=float(s_e))
    with torch.no_grad():
        return confidence_scores(aux_t, aux_e, tgt.labels[idx])


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(perm[start : start + batch_size].copy())


def _metric_from_logits(task: str, logits: torch.Tensor, tgt: _Targets) -> float:
    """Primary model-selection metric: macro AUC or concordance index."""
    if task == "survival":
        risks = cumulative_hazard_risk(logits).numpy()
        try:
            return concordance_index(risks, tgt.times, tgt.events)
        except ValueError:
            return 0.5
    probs = torch.softmax(logits, dim=1).numpy()
    values, _ = classification_metrics(probs, tgt.labels.numpy())
    if math.isnan(values["auc"]):
        return values["accuracy"]
    return values["auc"]


def _chunked(n: int, size: int = 64):
    for start in range(0, n, size):
        yield torch.arange(start, min(start + size, n))


def _teacher_logits(model: MultiModalTeacher, gt, ge, g10, g20) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for idx in _chunked(len(gt)):
            outs.append(model(gt[idx], ge[idx], g10[idx], g20[idx]).logits)
    return torch.cat(outs)


def _student_logits(model: SlideStudent, g10, g20) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for idx in _chunked(len(g10)):
            outs.append(model(g10[idx], g20[idx]).logits)
    return torch.cat(outs)


def _state_to_numpy(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _load_state(model: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    model.load_state_dict(state)


def _clone_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _nan_abort(loss: torch.Tensor, stage: str, epoch: int, batch_no: int, ids: list[str]) -> None:
    if not bool(torch.isfinite(loss)):
        raise PipelineError(
            f"non-finite loss in {stage} at epoch {epoch} batch {batch_no}; cases={ids}"
        )


def build_teacher(meta: dict, cfg: RunConfig) -> MultiModalTeacher:
    return MultiModalTeacher(
        n_tumor_genes=meta["n_tumor_genes"],
        n_tme_genes=meta["n_tme_genes"],
        slide_channels=meta["slide_channels"],
        n_out=meta["n_out"],
        dim=cfg.embed_dim,
        n_heads=cfg.n_heads,
        query_grid=cfg.query_grid,
        offset_scale=cfg.offset_scale,
    )


def build_student(meta: dict, cfg: RunConfig) -> SlideStudent:
    return SlideStudent(
        slide_channels=meta["slide_channels"],
        n_out=meta["n_out"],
        dim=cfg.student_dim,
        n_heads=cfg.n_heads,
        query_grid=cfg.query_grid,
        offset_scale=cfg.offset_scale,
        n_clusters=cfg.n_clusters,
        knn_k=cfg.knn_k,
        # distillation target: the teacher's concatenated subspace width
        target_width=2 * cfg.embed_dim,
    )


def train_teacher(cohort: Cohort, cfg: RunConfig, audit: AccessAudit | None = None) -> Checkpoint:
    """Stage I: fit the multi-modal teacher on one fold, return the best-validation checkpoint."""
    cfg.validate()
    audit = audit if audit is not None else AccessAudit()
    split = make_folds([c.case_id for c in cohort.cases], cfg.n_folds, cfg.seed, cfg.val_fraction)[cfg.fold_index]
    prep = fit_preprocessing(cohort, split.train_ids, cfg, audit)

    torch.manual_seed(derive_seed(cfg.seed, _SEED_TEACHER_INIT, cfg.fold_index))
    meta = {
        "task": cfg.task,
        "n_out": task_output_width(cfg.task),
        "slide_channels": cohort.dims["c"],
        "n_tumor_genes": len(prep["tumor_genes"]),
        "n_tme_genes": len(prep["tme_genes"]),
        "dims": dict(cohort.dims),
    }
    model = build_teacher(meta, cfg)

    gt, ge = _gene_tensors(cohort, split.train_ids, prep)
    g10, g20 = _slide_tensors(cohort, split.train_ids)
    tgt = _build_targets(cohort, split.train_ids, cfg.task)
    vgt, vge = _gene_tensors(cohort, split.val_ids, prep)
    vg10, vg20 = _slide_tensors(cohort, split.val_ids)
    vtgt = _build_targets(cohort, split.val_ids, cfg.task)

    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    shapes = {n: tuple(p.shape) for n, p in named}
    t_names, e_names, _ = subspace_parameter_names(model)
    subspace_names = set(t_names) | set(e_names)
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    log: dict = {"loss": [], "task": [], "dev": [], "diag_var": [], "val_metric": []}
    best_metric = -math.inf
    best_state = _clone_state(model)
    n_train = len(split.train_ids)
    for epoch in range(cfg.epochs):
        model.train()
        rng = _rng(cfg.seed, _SEED_TEACHER_BATCH, cfg.fold_index, epoch)
        for batch_no, idx in enumerate(_epoch_batches(n_train, cfg.batch_size, rng)):
            out = model(gt[idx], ge[idx], g10[idx], g20[idx])
            task = _task_loss(cfg.task, out.logits, tgt, idx)
            records = [
                AttentionRecord(out.attn[(s, "10")].flatten(1), out.attn[(s, "20")].flatten(1), s)
                for s in ("T", "E")
            ]
            sims = [cross_scale_similarity(r, cfg.igc_normalize) for r in records]
            dev = dev_loss(sims, cfg.dev_lambda)
            aux_t = _task_loss(cfg.task, out.aux_logits_tumor, tgt, idx)
            aux_e = _task_loss(cfg.task, out.aux_logits_tme, tgt, idx)
            total = task + dev + aux_t + aux_e
            _nan_abort(total, STAGE_TEACHER, epoch, batch_no, [split.train_ids[i] for i in idx])

            conf = _confidences(cfg.task, out.aux_logits_tumor, out.aux_logits_tme, tgt, idx)
            g_main = torch.autograd.grad(task + dev, params, retain_graph=True, allow_unused=True)
            g_t = torch.autograd.grad(aux_t, params, retain_graph=True, allow_unused=True)
            g_e = torch.autograd.grad(aux_e, params, allow_unused=True)
            bundle = build_bundle(
                {n: g for n, g in zip(names, g_t) if n in subspace_names},
                {n: g for n, g in zip(names, g_e) if n in subspace_names},
                t_names,
                e_names,
                shapes,
            )
            per_param = unpack_bundle(coordinate(bundle, conf))
            with torch.no_grad():
                for i, (name, p) in enumerate(named):
                    grad = torch.zeros_like(p)
                    if g_main[i] is not None:
                        grad += g_main[i]
                    if name in per_param:
                        grad += per_param[name]
                    else:
                        if g_t[i] is not None:
                            grad += g_t[i]
                        if g_e[i] is not None:
                            grad += g_e[i]
                    p.grad = grad
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)

            with torch.no_grad():
                diag_var = float(
                    np.mean([float(torch.var(torch.diagonal(c), unbiased=False)) for c in sims])
                )
            log["loss"].append(float(total.detach()))
            log["task"].append(float(task.detach()))
            log["dev"].append(float(dev.detach()))
            log["diag_var"].append(diag_var)

        model.eval()
        val_logits = _teacher_logits(model, vgt, vge, vg10, vg20)
        metric = _metric_from_logits(cfg.task, val_logits, vtgt)
        log["val_metric"].append(metric)
        if metric > best_metric:
            best_metric = metric
            best_state = _clone_state(model)

    model.load_state_dict(best_state)
    preprocessing = {
        "train_ids": split.train_ids,
        "val_ids": split.val_ids,
        "test_ids": split.test_ids,
        **prep,
    }
    return Checkpoint(
        stage=STAGE_TEACHER,
        run_config=dataclasses.asdict(cfg),
        preprocessing=preprocessing,
        meta=meta,
        params=_state_to_numpy(model),
        train_log=log,
    )


def _train_student_loop(
    model: SlideStudent,
    cohort: Cohort,
    split: FoldSplit,
    cfg: RunConfig,
    stage: str,
    teacher: MultiModalTeacher | None = None,
    teacher_prep: dict | None = None,
) -> tuple[dict[str, torch.Tensor], dict]:
    """Shared optimization loop for warmup and distillation.

    Both stages draw batches from the same seed stream, so a distillation run
    whose KL/MSE weights are zero reproduces a warmup continuation exactly.
    """
    g10, g20 = _slide_tensors(cohort, split.train_ids)
    tgt = _build_targets(cohort, split.train_ids, cfg.task)
    vg10, vg20 = _slide_tensors(cohort, split.val_ids)
    vtgt = _build_targets(cohort, split.val_ids, cfg.task)
    if teacher is not None:
        t_gt, t_ge = _gene_tensors(cohort, split.train_ids, teacher_prep)
        teacher.eval()

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    log: dict = {"loss": [], "task": [], "mse": [], "kl": [], "val_metric": []}
    best_metric = -math.inf
    best_state = _clone_state(model)
    n_train = len(split.train_ids)
    for epoch in range(cfg.epochs):
        model.train()
        rng = _rng(cfg.seed, _SEED_STUDENT_BATCH, cfg.fold_index, epoch)
        for batch_no, idx in enumerate(_epoch_batches(n_train, cfg.batch_size, rng)):
            out = model(g10[idx], g20[idx])
            task = _task_loss(cfg.task, out.logits, tgt, idx)
            loss = cfg.w_task * task
            mse_val = 0.0
            kl_val = 0.0
            if teacher is not None:
                with torch.no_grad():
                    t_out = teacher(t_gt[idx], t_ge[idx], g10[idx], g20[idx])
                # Zero-weight terms stay out of the graph entirely so the
                # optimization is bit-identical to a plain task-loss run.
                if cfg.w_kl > 0:
                    kl = prediction_kl(t_out.logits, out.logits, cfg.tau, cfg.tau_sq_scale)
                    loss = loss + cfg.w_kl * kl
                    kl_val = float(kl.detach())
                if cfg.w_mse > 0:
                    mse = representation_mse(t_out.rep_cat, out.rep)
                    loss = loss + cfg.w_mse * mse
                    mse_val = float(mse.detach())
            _nan_abort(loss, stage, epoch, batch_no, [split.train_ids[i] for i in idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            log["loss"].append(float(loss.detach()))
            log["task"].append(float(task.detach()))
            log["mse"].append(mse_val)
            log["kl"].append(kl_val)

        model.eval()
        metric = _metric_from_logits(cfg.task, _student_logits(model, vg10, vg20), vtgt)
        log["val_metric"].append(metric)
        if metric > best_metric:
            best_metric = metric
            best_state = _clone_state(model)
    return best_state, log


def warmup_student(
    cohort: Cohort,
    cfg: RunConfig,
    audit: AccessAudit | None = None,
    init_params: dict[str, np.ndarray] | None = None,
) -> Checkpoint:
    """Stage II warmup: slide-only student on the task loss alone."""
    cfg.validate()
    split = make_folds([c.case_id for c in cohort.cases], cfg.n_folds, cfg.seed, cfg.val_fraction)[cfg.fold_index]
    torch.manual_seed(derive_seed(cfg.seed, _SEED_STUDENT_INIT, cfg.fold_index))
    meta = {
        "task": cfg.task,
        "n_out": task_output_width(cfg.task),
        "slide_channels": cohort.dims["c"],
        "dims": dict(cohort.dims),
    }
    model = build_student(meta, cfg)
    if init_params is not None:
        _load_state(model, init_params)
    best_state, log = _train_student_loop(model, cohort, split, cfg, STAGE_WARMUP)
    model.load_state_dict(best_state)
    return Checkpoint(
        stage=STAGE_WARMUP,
        run_config=dataclasses.asdict(cfg),
        preprocessing={"train_ids": split.train_ids, "val_ids": split.val_ids, "test_ids": split.test_ids},
        meta=meta,
        params=_state_to_numpy(model),
        train_log=log,
    )


def distill_student(
    cohort: Cohort,
    teacher_ckpt: Checkpoint,
    warmup_ckpt: Checkpoint,
    cfg: RunConfig,
    audit: AccessAudit | None = None,
) -> Checkpoint:
    """Stage II distillation: optimize the warmed-up student on the combined objective."""
    cfg.validate()
    audit = audit if audit is not None else AccessAudit()
    if teacher_ckpt.stage != STAGE_TEACHER:
        raise PipelineError(f"expected a teacher checkpoint, got stage {teacher_ckpt.stage!r}")
    if warmup_ckpt.stage != STAGE_WARMUP:
        raise PipelineError(f"expected a warmup checkpoint, got stage {warmup_ckpt.stage!r}")
    for key in ("train_ids", "val_ids", "test_ids"):
        if teacher_ckpt.preprocessing[key] != warmup_ckpt.preprocessing[key]:
            raise PipelineError(f"teacher and warmup checkpoints disagree on {key}")
    if teacher_ckpt.meta["task"] != cfg.task or warmup_ckpt.meta["task"] != cfg.task:
        raise PipelineError("checkpoint tasks do not match the run config")

    split = FoldSplit(
        train_ids=list(teacher_ckpt.preprocessing["train_ids"]),
        val_ids=list(teacher_ckpt.preprocessing["val_ids"]),
        test_ids=list(teacher_ckpt.preprocessing["test_ids"]),
    )
    # The teacher must have been fit on this cohort's preprocessing: recompute
    # the HVG selection on the training split and require an exact match.
    lookup = _case_lookup(cohort)
    rows = [lookup[cid] for cid in split.train_ids]
    audit.log("fit_hvg", case_ids=sorted(split.train_ids))
    hvg = [int(g) for g in select_hvgs(cohort.expression_matrix()[rows], cfg.hvg_fraction)]
    if hvg != list(teacher_ckpt.preprocessing["hvg_idx"]):
        raise PipelineError("preprocessing mismatch: teacher checkpoint HVG indices differ from this cohort/fold")

    teacher_cfg = RunConfig(**teacher_ckpt.run_config).validate()
    teacher = build_teacher(teacher_ckpt.meta, teacher_cfg)
    _load_state(teacher, teacher_ckpt.params)
    for p in teacher.parameters():
        p.requires_grad_(False)

    model = build_student(warmup_ckpt.meta, cfg)
    _load_state(model, warmup_ckpt.params)
    best_state, log = _train_student_loop(
        model, cohort, split, cfg, STAGE_DISTILLED, teacher=teacher, teacher_prep=teacher_ckpt.preprocessing
    )
    model.load_state_dict(best_state)

    # Teacher subspace anchors over the training split, used to label student
    # prototypes as tumor- or TME-like at export time.
    t_gt, t_ge = _gene_tensors(cohort, split.train_ids, teacher_ckpt.preprocessing)
    g10, g20 = _slide_tensors(cohort, split.train_ids)
    reps_t, reps_e = [], []
    with torch.no_grad():
        for idx in _chunked(len(split.train_ids)):
            t_out = teacher(t_gt[idx], t_ge[idx], g10[idx], g20[idx])
            reps_t.append(t_out.rep_tumor)
            reps_e.append(t_out.rep_tme)
    meta = dict(warmup_ckpt.meta)
    meta["teacher_rep_mean_tumor"] = [float(v) for v in torch.cat(reps_t).mean(0)]
    meta["teacher_rep_mean_tme"] = [float(v) for v in torch.cat(reps_e).mean(0)]

    preprocessing = dict(warmup_ckpt.preprocessing)
    preprocessing["hvg_idx"] = list(teacher_ckpt.preprocessing["hvg_idx"])
    return Checkpoint(
        stage=STAGE_DISTILLED,
        run_config=dataclasses.asdict(cfg),
        preprocessing=preprocessing,
        meta=meta,
        params=_state_to_numpy(model),
        train_log=log,
    )


_SETTING_STAGES = {
    "unimodal": (STAGE_WARMUP, STAGE_DISTILLED),
    "missing_modality": (STAGE_DISTILLED,),
    "multimodal": (STAGE_TEACHER,),
}


def evaluate(ckpt: Checkpoint, cohort: Cohort, setting: str, audit: AccessAudit | None = None) -> EvalReport:
    """Evaluate a checkpoint on its held-out fold under one modality setting."""
    if setting not in _SETTING_STAGES:
        raise PipelineError(f"unknown setting {setting!r}")
    if ckpt.stage not in _SETTING_STAGES[setting]:
        raise PipelineError(f"setting {setting!r} cannot evaluate a {ckpt.stage!r} checkpoint")
    cfg = RunConfig(**ckpt.run_config).validate()
    test_ids = list(ckpt.preprocessing["test_ids"])
    lookup = _case_lookup(cohort)
    missing = [cid for cid in test_ids if cid not in lookup]
    if missing:
        raise PipelineError(f"cohort lacks test cases {missing[:3]}...")

    tgt = _build_targets(cohort, test_ids, cfg.task)
    g10, g20 = _slide_tensors(cohort, test_ids)
    if ckpt.stage == STAGE_TEACHER:
        model = build_teacher(ckpt.meta, cfg)
        _load_state(model, ckpt.params)
        model.eval()
        gt, ge = _gene_tensors(cohort, test_ids, ckpt.preprocessing)
        logits = _teacher_logits(model, gt, ge, g10, g20)
    else:
        model = build_student(ckpt.meta, cfg)
        _load_state(model, ckpt.params)
        model.eval()
        logits = _student_logits(model, g10, g20)

    if cfg.task == "survival":
        risks = cumulative_hazard_risk(logits).numpy()
        values = {"cindex": concordance_index(risks, tgt.times, tgt.events)}
        per_class: dict = {}
    else:
        probs = torch.softmax(logits, dim=1).numpy()
        values, per_class = classification_metrics(probs, tgt.labels.numpy())
    return EvalReport(
        task=cfg.task,
        setting=setting,
        fold=cfg.fold_index,
        n_cases=len(test_ids),
        values=values,
        per_class=per_class,
    )


def label_prototypes(ckpt: Checkpoint, prototypes: torch.Tensor, rep_proj_weight, rep_proj_bias) -> list[str]:
    """Label each prototype tumor/TME by its projected half's cosine match."""
    anchor_t = torch.tensor(ckpt.meta["teacher_rep_mean_tumor"])
    anchor_e = torch.tensor(ckpt.meta["teacher_rep_mean_tme"])
    width = anchor_t.shape[0]
    projected = prototypes @ rep_proj_weight.T + rep_proj_bias
    labels = []
    for row in projected:
        cos_t = torch.nn.functional.cosine_similarity(row[:width], anchor_t, dim=0)
        cos_e = torch.nn.functional.cosine_similarity(row[width:], anchor_e, dim=0)
        labels.append("T" if float(cos_t) >= float(cos_e) else "E")
    return labels


def cluster_export(ckpt: Checkpoint, cohort: Cohort, split: str = "test") -> tuple[list[dict], dict]:
    """Per-patch 10x cluster assignments with subspace labels and mask overlap.

    Returns (rows, summary): one row per patch with its cluster id and
    tumor/TME label, plus per-case and mean Dice/recall against the planted
    tumor masks (where present).
    """
    if ckpt.stage != STAGE_DISTILLED:
        raise PipelineError("cluster export needs a distilled student checkpoint")
    if "teacher_rep_mean_tumor" not in ckpt.meta:
        raise PipelineError("checkpoint lacks teacher subspace anchors")
    cfg = RunConfig(**ckpt.run_config).validate()
    ids = list(ckpt.preprocessing["test_ids"] if split == "test" else [c.case_id for c in cohort.cases])
    lookup = _case_lookup(cohort)
    model = build_student(ckpt.meta, cfg)
    _load_state(model, ckpt.params)
    model.eval()

    rows: list[dict] = []
    dices, recalls = {}, {}
    with torch.no_grad():
        for cid in ids:
            case = cohort.cases[lookup[cid]]
            g10 = torch.from_numpy(case.grid10.data[None]).float()
            g20 = torch.from_numpy(case.grid20.data[None]).float()
            out = model(g10, g20)
            assignment = out.assignments["10"][0]
            labels = label_prototypes(ckpt, out.prototypes["10"][0], model.rep_proj.weight, model.rep_proj.bias)
            h, w, _ = case.grid10.data.shape
            tumor_mask = np.zeros((h, w), dtype=bool)
            for slot in range(h * w):
                r, c = divmod(slot, w)
                cluster = int(assignment[slot])
                label = labels[cluster]
                sr, sc = case.grid10.coords[r, c]
                rows.append(
                    {
                        "case_id": cid,
                        "row": int(sr),
                        "col": int(sc),
                        "cluster": cluster,
                        "label": label,
                    }
                )
                if label == "T":
                    tumor_mask[r, c] = True
            if case.tumor_mask10 is not None:
                dice, recall = cluster_overlap(tumor_mask, case.tumor_mask10)
                dices[cid] = dice
                recalls[cid] = recall

    summary = {
        "n_cases": len(ids),
        "dice": dices,
        "recall": recalls,
        "mean_dice": float(np.mean(list(dices.values()))) if dices else float("nan"),
        "mean_recall": float(np.mean(list(recalls.values()))) if recalls else float("nan"),
    }
    return rows, summary


# ---------------------------------------------------------------------------
# Gradient checking: central finite differences against autograd, float64.
# ---------------------------------------------------------------------------


def _finite_difference(f, x0: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        hi = x0.copy()
        lo = x0.copy()
        hi[i] += eps
        lo[i] -= eps
        grad[i] = (f(hi) - f(lo)) / (2 * eps)
    return grad


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check_function(build, epsilon: float) -> float:
    """build() -> (leaf tensors list, closure producing a scalar from them)."""
    leaves, closure = build()
    x0 = np.concatenate([leaf.detach().numpy().reshape(-1) for leaf in leaves])

    def assign(vec: np.ndarray) -> None:
        offset = 0
        with torch.no_grad():
            for leaf in leaves:
                n = leaf.numel()
                leaf.copy_(torch.from_numpy(vec[offset : offset + n].reshape(leaf.shape)))
                offset += n

    def f(vec: np.ndarray) -> float:
        assign(vec)
        with torch.no_grad():
            return float(closure())

    assign(x0)
    for leaf in leaves:
        leaf.requires_grad_(True)
    value = closure()
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    analytic = np.concatenate(
        [
            (g if g is not None else torch.zeros_like(leaf)).detach().numpy().reshape(-1)
            for g, leaf in zip(grads, leaves)
        ]
    )
    for leaf in leaves:
        leaf.requires_grad_(False)
    numeric = _finite_difference(f, x0, epsilon)
    return _max_rel_err(analytic, numeric)


def _readout(t: torch.Tensor, seed: int = 123) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    w = torch.rand(t.shape, generator=gen, dtype=t.dtype)
    return (t * w).sum()


def _build_dmsf_check():
    torch.manual_seed(7)
    branch = FusionBranch(n_genes=5, dim=8, n_heads=2, query_grid=2, offset_scale=0.5).double()
    genes = torch.randn(2, 5, dtype=torch.float64)
    grid10 = torch.randn(2, 3, 3, 8, dtype=torch.float64)
    grid20 = torch.randn(2, 6, 6, 8, dtype=torch.float64)
    leaves = list(branch.parameters()) + [genes, grid10, grid20]

    def closure():
        rep, _ = branch(genes, {"10": grid10, "20": grid20})
        return _readout(rep)

    return leaves, closure


def _build_selection_check():
    from .deform import MultiHeadAttention

    torch.manual_seed(8)
    attn = MultiHeadAttention(8, 2).double()
    queries = torch.randn(2, 3, 8, dtype=torch.float64)
    keys = torch.randn(2, 5, 8, dtype=torch.float64)
    leaves = list(attn.parameters()) + [queries, keys]

    def closure():
        out, _ = attn(queries, keys)
        return _readout(out)

    return leaves, closure


def _build_dev_check():
    torch.manual_seed(9)
    a10_t = torch.rand(3, 6, dtype=torch.float64)
    a20_t = torch.rand(3, 6, dtype=torch.float64)
    a10_e = torch.rand(3, 6, dtype=torch.float64)
    a20_e = torch.rand(3, 6, dtype=torch.float64)
    leaves = [a10_t, a20_t, a10_e, a20_e]

    def closure():
        sims = [
            cross_scale_similarity(AttentionRecord(a10_t, a20_t, "T")),
            cross_scale_similarity(AttentionRecord(a10_e, a20_e, "E")),
        ]
        return dev_loss(sims, 0.7)

    return leaves, closure


def _build_ita_merge_check():
    from .aggregator import significance_and_merge

    torch.manual_seed(10)
    tokens = torch.randn(7, 5, dtype=torch.float64)
    weight = torch.randn(5, dtype=torch.float64) * 0.3
    bias = torch.randn(1, dtype=torch.float64) * 0.1
    # Assignment is a fixed discrete structure for the check.
    assignment = cluster_tokens(tokens.clone(), n_clusters=3, knn_k=2).assignment
    leaves = [tokens, weight, bias]

    def closure():
        _, protos = significance_and_merge(tokens, assignment, weight, bias[0], 3)
        return _readout(protos)

    return leaves, closure


def _build_kl_check():
    torch.manual_seed(11)
    teacher_logits = torch.randn(4, 5, dtype=torch.float64)
    student_logits = torch.randn(4, 5, dtype=torch.float64)
    leaves = [student_logits]

    def closure():
        return prediction_kl(teacher_logits, student_logits, tau=2.0, tau_sq_scale=True)

    return leaves, closure


def _build_mse_check():
    torch.manual_seed(12)
    teacher_rep = torch.randn(3, 9, dtype=torch.float64)
    student_rep = torch.randn(3, 9, dtype=torch.float64)
    leaves = [student_rep]

    def closure():
        return representation_mse(teacher_rep, student_rep)

    return leaves, closure


def _build_ce_check():
    torch.manual_seed(13)
    logits = torch.randn(6, 4, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 1, 2])
    leaves = [logits]

    def closure():
        return ce_loss(logits, labels)

    return leaves, closure


def _build_survival_check():
    torch.manual_seed(14)
    logits = torch.randn(6, 4, dtype=torch.float64)
    bins = torch.tensor([0, 1, 2, 3, 2, 0])
    censored = torch.tensor([False, True, False, True, False, False])
    leaves = [logits]

    def closure():
        return survival_nll(logits, bins, censored)

    return leaves, closure


GRADCHECK_MODULES = {
    "dmsf": _build_dmsf_check,
    "selection": _build_selection_check,
    "dev": _build_dev_check,
    "ita_merge": _build_ita_merge_check,
    "kl": _build_kl_check,
    "mse": _build_mse_check,
    "ce": _build_ce_check,
    "survival_nll": _build_survival_check,
}


def gradcheck(module: str = "all", epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    Runs on fixed tiny float64 instances per module; keys of the returned
    dict are module selectors, values the max relative errors.
    """
    if module == "all":
        selected = list(GRADCHECK_MODULES)
    elif module in GRADCHECK_MODULES:
        selected = [module]
    else:
        raise PipelineError(f"unknown gradcheck module {module!r}; choose from {sorted(GRADCHECK_MODULES)}")
    return {name: _check_function(GRADCHECK_MODULES[name], epsilon) for name in selected}
