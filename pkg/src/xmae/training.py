"""Masked-MSE objective, AdamW with decoupled decay, warmup+cosine
schedule, the epoch loop with curriculum hook and early stopping, and
finite-difference verification of the backward pass."""

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import masking, model, nn, synthgen


class EmptyMask(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, tensor_name, step=None):
        self.tensor_name = tensor_name
        self.step = step
        super().__init__(f"non-finite gradient in {tensor_name!r}"
                         + (f" at step {step}" if step is not None else ""))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 37
    patience: int = 17
    batch_size: int = 64          # paper-scale value is 512
    base_lr: float = 3e-4
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.95)
    warmup_frac: float = 0.10
    seed: int = 77
    objective: str = "xmae"       # or "mm_baseline"
    curriculum: bool = True
    mask_mode: str = "contiguous"  # or "random"
    mask_ratio: float = 0.80      # initial (curriculum) or fixed ratio
    mask_ratio_max: float = 0.90
    mm_mask_ecg: float = 0.90
    mm_mask_ppg: float = 0.60
    grad_clip: float = 1.0
    val_frac: float = 0.10
    splice_aug: float = 0.50      # fraction of items given a template splice

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def masked_mse(pred, target, loss_mask) -> nn.Tensor:
    """Mean squared error over masked positions only."""
    mask = np.asarray(loss_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMask("loss mask selects no samples")
    pred_t = pred if isinstance(pred, nn.Tensor) else nn.Tensor(
        np.asarray(pred, dtype=np.float64), requires_grad=False)
    target = np.asarray(target, dtype=pred_t.data.dtype)
    if target.shape != pred_t.data.shape or mask.shape != target.shape:
        raise ValueError("pred, target and loss_mask shapes must match")
    diff = nn.mul(nn.sub(pred_t, nn.as_tensor(target)),
                  nn.as_tensor(mask.astype(pred_t.data.dtype)))
    return nn.scale(nn.ssum(nn.mul(diff, diff)), 1.0 / count)


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to 0."""
    if not 0 <= step < total_steps:
        raise ValueError("step out of range")
    warmup = max(int(round(cfg.warmup_frac * total_steps)), 1)
    if step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(total_steps - warmup, 1)
    return cfg.base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def _decayed(name: str) -> bool:
    # weight matrices only: not biases, norm scales/offsets, positional
    # embeddings, mask/modality tokens
    return name.split(".")[-1] in ("w", "w1", "w2", "wq", "wk", "wv", "wo")


class OptimState:
    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0


def optimizer_step(params: dict, grads: dict, state: OptimState,
                   lr: float, cfg: TrainConfig) -> None:
    """AdamW: bias-corrected moments, decoupled weight decay on weight
    matrices only. Aborts (no mutation) on any non-finite gradient."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name, state.t)
    b1, b2 = cfg.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / c1) / (np.sqrt(v / c2) + 1e-8)
        tensor.data -= lr * update.astype(tensor.data.dtype)
        if cfg.weight_decay > 0 and _decayed(name):
            tensor.data -= lr * cfg.weight_decay * tensor.data


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                        for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def _collect_grads(params: dict) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


def _zero_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None


@dataclass
class Corpus:
    ppg: np.ndarray       # (n, L)
    ecg: np.ndarray       # (n, L)
    subject_ids: list
    stems: list = field(default_factory=list)
    fs: int = 100

    def __len__(self):
        return self.ppg.shape[0]


def load_corpus(data_dir, manifest: dict) -> Corpus:
    ppg, ecg, subjects, stems = [], [], [], []
    fs = 100
    for entry in manifest["subjects"]:
        for stem in entry["files"]:
            p, e, _ = synthgen.load_pair(data_dir, stem)
            ppg.append(p.samples)
            ecg.append(e.samples)
            subjects.append(entry["subject_id"])
            stems.append(stem)
            fs = p.fs
    return Corpus(np.asarray(ppg, dtype=np.float32),
                  np.asarray(ecg, dtype=np.float32), subjects, stems, fs)


def split_by_subject(corpus: Corpus, val_frac: float, seed: int):
    subjects = sorted(set(corpus.subject_ids))
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(len(subjects))
    n_val = max(int(round(val_frac * len(subjects))), 1)
    val_subjects = {subjects[i] for i in order[:n_val]}
    val_idx = np.asarray([i for i, s in enumerate(corpus.subject_ids)
                          if s in val_subjects])
    train_idx = np.asarray([i for i, s in enumerate(corpus.subject_ids)
                            if s not in val_subjects])
    return train_idx, val_idx


class _SpliceIndex:
    """Per-segment detected landmarks and same-subject partner lists for
    template-splice augmentation, built once over the training split."""

    def __init__(self, corpus: Corpus, train_idx):
        from . import evalkit
        from .segments import Modality, WaveformSegment
        fs = corpus.fs
        self.onsets = {}
        self.rpeaks = {}
        self.partners = {}
        by_subject = {}
        for i in np.asarray(train_idx):
            i = int(i)
            ppg = WaveformSegment(np.asarray(corpus.ppg[i], dtype=float),
                                  fs, Modality.PPG)
            ecg = WaveformSegment(np.asarray(corpus.ecg[i], dtype=float),
                                  fs, Modality.ECG)
            self.onsets[i] = np.asarray(
                [int(round(t * fs)) for t in evalkit.detect_ppg_onsets(ppg)])
            self.rpeaks[i] = np.asarray(
                [int(round(t * fs)) for t in evalkit.detect_r_peaks(ecg)])
            by_subject.setdefault(corpus.subject_ids[i], []).append(i)
        for i in self.onsets:
            sid = corpus.subject_ids[i]
            self.partners[i] = [j for j in by_subject[sid] if j != i]


def _splice_item(corpus: Corpus, sidx: _SpliceIndex, i: int, n_tpl: int,
                 xf: int, rng):
    """Build a template-spliced (ppg, ecg) pair for item i, mirroring the
    reconstruction protocol: a same-subject template ending at an onset
    valley occupies the leading n_tpl samples; the item's own pair, cut at
    an onset valley, fills the rest. Returns None when no valid template
    window exists."""
    partners = sidx.partners.get(i, [])
    if not partners:
        return None
    j = int(partners[rng.integers(0, len(partners))])
    length = corpus.ppg.shape[1]
    ends = [int(o) for o in sidx.onsets[j] if n_tpl <= o <= length]
    ends = [e for e in ends
            if np.any((sidx.rpeaks[j] > e - n_tpl) & (sidx.rpeaks[j] < e))]
    if not ends:
        return None
    end = ends[int(rng.integers(0, len(ends)))]
    tpl_ppg = np.asarray(corpus.ppg[j, end - n_tpl:end], dtype=float)
    tpl_ecg = np.asarray(corpus.ecg[j, end - n_tpl:end], dtype=float)
    cuts = [int(o) for o in sidx.onsets[i] if o <= n_tpl]
    cut = int(cuts[rng.integers(0, len(cuts))]) if cuts else 0
    fill = length - n_tpl
    ppg = np.empty(length)
    ecg = np.empty(length)
    ppg[:n_tpl] = tpl_ppg
    ecg[:n_tpl] = tpl_ecg
    ppg[n_tpl:] = corpus.ppg[i, cut:cut + fill]
    ecg[n_tpl:] = corpus.ecg[i, cut:cut + fill]
    if xf > 0 and cut >= xf:
        from .evalkit import _cosine_crossfade
        ppg[n_tpl:n_tpl + xf] = _cosine_crossfade(
            tpl_ppg[-xf:], np.asarray(corpus.ppg[i, cut:cut + xf],
                                      dtype=float))
    return ppg, ecg


def _assemble_batch(corpus: Corpus, sidx, idx, ratio, cfg: TrainConfig,
                    mcfg: model.ModelConfig, epoch: int):
    """Batch arrays plus per-item masks. With probability splice_aug an
    item is replaced by a template-spliced pair whose visible run is the
    leading template patches (the reconstruction-time layout)."""
    mask_seeds = [[cfg.seed, 3, epoch, int(i)] for i in idx]
    if sidx is None or cfg.splice_aug <= 0:
        return corpus.ppg[idx], corpus.ecg[idx], None, mask_seeds
    n_masked = int(np.floor(ratio * mcfg.n_patches))
    n_vis = mcfg.n_patches - n_masked
    n_tpl = n_vis * mcfg.patch_len
    xf = int(round(0.050 * corpus.fs))
    ppg = np.array(corpus.ppg[idx], dtype=np.float32)
    ecg = np.array(corpus.ecg[idx], dtype=np.float32)
    masks = _make_masks(cfg, mcfg, ratio, mask_seeds) \
        if cfg.objective == "xmae" else None
    leading = np.zeros(mcfg.n_patches, dtype=bool)
    leading[:n_vis] = True
    for b, i in enumerate(idx):
        rng = np.random.default_rng([cfg.seed, 5, epoch, int(i)])
        if rng.random() >= cfg.splice_aug:
            continue
        spliced = _splice_item(corpus, sidx, int(i), n_tpl, xf, rng)
        if spliced is None:
            continue
        ppg[b] = spliced[0]
        ecg[b] = spliced[1]
        if masks is not None:
            masks[b] = masking.MaskSpec(leading.copy())
    return ppg, ecg, masks, mask_seeds


def _make_masks(cfg: TrainConfig, mcfg: model.ModelConfig, ratio, seeds):
    fn = masking.contiguous_mask if cfg.mask_mode == "contiguous" \
        else masking.random_mask
    return [fn(mcfg.n_patches, ratio, s) for s in seeds]


def _batch_loss(params, mcfg, cfg, ppg, ecg, ratio, mask_seeds,
                train_mode, rng_seed, masks=None):
    if cfg.objective == "xmae":
        if masks is None:
            masks = _make_masks(cfg, mcfg, ratio, mask_seeds)
        ecg_hat, lm, _ = model.forward_xmae(params, mcfg, ppg, ecg, masks,
                                            train_mode, rng_seed)
        return masked_mse(ecg_hat, ecg.astype(ecg_hat.data.dtype), lm)
    masks_e = [masking.random_mask(mcfg.n_patches, cfg.mm_mask_ecg, [s, 0])
               for s in mask_seeds]
    masks_p = [masking.random_mask(mcfg.n_patches, cfg.mm_mask_ppg, [s, 1])
               for s in mask_seeds]
    ppg_hat, ecg_hat, lm_p, lm_e = model.forward_mm_baseline(
        params, mcfg, ppg, ecg, masks_p, masks_e, train_mode, rng_seed)
    dtype = ppg_hat.data.dtype
    return nn.add(masked_mse(ppg_hat, ppg.astype(dtype), lm_p),
                  masked_mse(ecg_hat, ecg.astype(dtype), lm_e))


def train(manifest: dict, data_dir, cfg: TrainConfig,
          mcfg: model.ModelConfig, out_dir) -> dict:
    """Full pretraining run. Writes checkpoint.xmck and train_log.csv to
    out_dir; returns a summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(data_dir, manifest)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    train_idx, val_idx = split_by_subject(corpus, cfg.val_frac, cfg.seed)

    params = model.init_params(mcfg, cfg.objective, seed=cfg.seed)
    state = OptimState(params)
    sidx = _SpliceIndex(corpus, train_idx) if cfg.splice_aug > 0 else None
    n_batches = int(np.ceil(len(train_idx) / cfg.batch_size))
    total_steps = cfg.epochs * n_batches
    curriculum = masking.CurriculumState(
        m_current=cfg.mask_ratio, m_max=cfg.mask_ratio_max)
    ratio = cfg.mask_ratio

    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    log_rows = []
    best_val = np.inf
    best_arrays = {k: v.copy() for k, v in
                   model.params_to_arrays(params).items()}
    epochs_since_best = 0
    step = 0
    stopped = None

    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        order = shuffle_rng.permutation(train_idx)
        losses = []
        lr = cfg.base_lr
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            ppg_b, ecg_b, masks_b, mask_seeds = _assemble_batch(
                corpus, sidx, idx, ratio, cfg, mcfg, epoch)
            loss = _batch_loss(params, mcfg, cfg, ppg_b, ecg_b,
                               ratio, mask_seeds, True,
                               rng_seed=(cfg.seed * 1000003 + epoch * 1009 + bi),
                               masks=masks_b)
            _zero_grads(params)
            loss.backward()
            grads = _collect_grads(params)
            clip_global_norm(grads, cfg.grad_clip)
            lr = lr_at_step(step, total_steps, cfg)
            optimizer_step(params, grads, state, lr, cfg)
            losses.append(float(loss.data))
            step += 1

        val_loss = evaluate_loss(params, mcfg, cfg, corpus, val_idx, ratio)
        if cfg.curriculum and cfg.objective == "xmae":
            curriculum = masking.curriculum_update(curriculum, val_loss)
            ratio = curriculum.m_current
        train_loss = float(np.mean(losses)) if losses else np.nan
        log_rows.append((epoch, train_loss, val_loss, ratio, lr,
                         time.perf_counter() - t_start))
        if val_loss < best_val:
            best_val = val_loss
            best_arrays = {k: v.copy() for k, v in
                           model.params_to_arrays(params).items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                stopped = epoch
                break

    log_path = out_dir / "train_log.csv"
    with open(log_path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,mask_ratio,lr,seconds\n")
        for row in log_rows:
            fh.write("%d,%.8e,%.8e,%.4f,%.8e,%.3f\n" % row)

    ckpt_path = out_dir / "checkpoint.xmck"
    tensors = dict(best_arrays)
    for name, m in state.m.items():
        tensors[f"opt.m.{name}"] = m
    for name, v in state.v.items():
        tensors[f"opt.v.{name}"] = v
    tensors["opt.t"] = np.asarray([state.t], dtype=np.float32)
    meta = {"model": mcfg.to_dict(), "train": cfg.to_dict(),
            "objective": cfg.objective, "best_val_loss": best_val}
    model.save_checkpoint(ckpt_path, meta, tensors)
    return {"checkpoint": str(ckpt_path), "log": str(log_path),
            "best_val_loss": best_val, "epochs_run": len(log_rows),
            "early_stopped_at": stopped}


def evaluate_loss(params, mcfg, cfg, corpus, idx, ratio,
                  batch_size=256) -> float:
    """Deterministic validation loss at the given mask ratio, dropout off,
    fixed per-segment mask seeds."""
    if len(idx) == 0:
        return np.nan
    total, count = 0.0, 0
    for start in range(0, len(idx), batch_size):
        sl = np.asarray(idx[start:start + batch_size])
        mask_seeds = [[cfg.seed, 4, int(i)] for i in sl]
        loss = _batch_loss(params, mcfg, cfg, corpus.ppg[sl],
                           corpus.ecg[sl], ratio, mask_seeds, False, 0)
        total += float(loss.data) * sl.size
        count += sl.size
    return total / count


def load_model(ckpt_path):
    """Read a checkpoint back into (meta, params) skipping optimizer state."""
    meta, tensors = model.load_checkpoint(ckpt_path)
    params = model.arrays_to_params(
        {k: v for k, v in tensors.items() if not k.startswith("opt.")})
    mcfg = model.ModelConfig.from_dict(meta["model"])
    return meta, mcfg, params


def grad_check(mcfg: model.ModelConfig = model.TINY, seed: int = 0,
               samples_per_tensor: int = 6, h: float = 1e-4,
               mutate_softmax_backward: bool = False) -> float:
    """Central finite differences vs analytic gradients over every
    parameter tensor, in 64-bit arithmetic. Returns max relative error."""
    rng = np.random.default_rng(seed)
    params = model.init_params(mcfg, "xmae", seed=seed, dtype=np.float64)
    ppg = rng.standard_normal(mcfg.seq_len)
    ecg = rng.standard_normal(mcfg.seq_len)
    mask = masking.contiguous_mask(mcfg.n_patches, 0.5, seed)

    def loss_value():
        ecg_hat, lm, _ = model.forward_xmae(params, mcfg, ppg, ecg, mask)
        return masked_mse(ecg_hat, ecg, lm)

    old_flag = nn.SOFTMAX_BACKWARD_SIGN_BUG
    nn.SOFTMAX_BACKWARD_SIGN_BUG = mutate_softmax_backward
    try:
        loss = loss_value()
        _zero_grads(params)
        loss.backward()
        analytic = _collect_grads(params)
    finally:
        nn.SOFTMAX_BACKWARD_SIGN_BUG = old_flag

    max_rel = 0.0
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(samples_per_tensor, n), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            lp = float(loss_value().data)
            flat[j] = orig - h
            lm_ = float(loss_value().data)
            flat[j] = orig
            fd = (lp - lm_) / (2 * h)
            an = analytic[name].reshape(-1)[j]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel
