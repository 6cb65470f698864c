"""scikit-learn style wrappers over the functional core."""

from __future__ import annotations


import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .calibrate import CalibOptions
from .nervlite import Checkpoint, ModelSpec, TrainOptions, build_model, model_graph, psnr, train
from .pipeline import quantize
from .video import VideoClip


def check_clip(X) -> VideoClip:
    """Accept a VideoClip or a uint8 array of shape (T, 3, H, W)."""
    if isinstance(X, VideoClip):
        return X
    arr = np.asarray(X)
    if arr.dtype != np.uint8:
        raise TypeError(f"clip array must be uint8, got {arr.dtype}")
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"clip array must have shape (T, 3, H, W), got {arr.shape}")
    return VideoClip(arr)


def check_frame_indices(t, frames: int) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(t))
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("frame indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= frames):
        raise ValueError(f"frame index out of range [0, {frames})")
    return idx.astype(np.int64)


def check_is_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")


class NeRVLite(BaseEstimator):
    """Fits a frame-index INR to one clip; ``predict(t)`` renders frames in [0, 1]."""

    def __init__(self, posenc_freqs=8, posenc_base=1.25, stem_dims=(32,), seed_shape=(8, 4, 4),
                 blocks=((16, 2), (12, 2), (8, 2)), epochs=1500, lr=1e-2, batch=4, random_state=0):
        self.posenc_freqs = posenc_freqs
        self.posenc_base = posenc_base
        self.stem_dims = stem_dims
        self.seed_shape = seed_shape
        self.blocks = blocks
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.random_state = random_state

    def _spec(self, frames: int) -> ModelSpec:
        return ModelSpec(self.posenc_freqs, self.posenc_base, self.stem_dims, self.seed_shape, self.blocks, frames)

    def fit(self, X, y=None):
        clip = check_clip(X)
        spec = self._spec(clip.frames)
        spec.check_clip(*clip.dims)
        opts = TrainOptions(epochs=self.epochs, lr=self.lr, batch=self.batch, seed=self.random_state)
        self.checkpoint_ = train(build_model(spec, self.random_state), clip, opts)
        self.n_params_ = self.checkpoint_.n_params
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "NeRVLite":
        s = ckpt.spec
        est = cls(s.posenc_freqs, s.posenc_base, s.stem_dims, s.seed_shape, s.blocks)
        est.checkpoint_ = ckpt
        est.n_params_ = ckpt.n_params
        return est

    def predict(self, t) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        ck = self.checkpoint_
        idx = check_frame_indices(t, ck.spec.frames)
        return model_graph(ck.spec).render(ck.weights, idx).copy()

    def score(self, X, y=None) -> float:
        """Mean PSNR (dB) of the rendering against ``X``."""
        clip = check_clip(X)
        return psnr(self.predict(np.arange(clip.frames)), clip.as_float())


class RateQuantizer(TransformerMixin, BaseEstimator):
    """Rate-targeted post-training quantizer.

    ``fit(model, clip)`` allocates bitwidths and calibrates; ``transform(model)``
    returns a checkpoint whose weights are the decodable dequantized weights.
    """

    def __init__(self, target_bits=4.0, calib_iters=21000, lam=0.1, granularity="network", steps="channel",
                 candidate_bits=(3, 4, 5, 6, 7, 8), cap=200, tol=0.05, random_state=0):
        self.target_bits = target_bits
        self.calib_iters = calib_iters
        self.lam = lam
        self.granularity = granularity
        self.steps = steps
        self.candidate_bits = candidate_bits
        self.cap = cap
        self.tol = tol
        self.random_state = random_state

    @staticmethod
    def _checkpoint(X) -> Checkpoint:
        if isinstance(X, Checkpoint):
            return X
        if isinstance(X, NeRVLite):
            check_is_fitted(X, "checkpoint_")
            return X.checkpoint_
        raise TypeError("expected a Checkpoint or a fitted NeRVLite")

    def fit(self, X, y=None):
        if y is None:
            raise ValueError("fit needs the clip as y (the sensitivity is measured against it)")
        ckpt = self._checkpoint(X)
        opts = CalibOptions(iterations=self.calib_iters, lam=self.lam, seed=self.random_state)
        res = quantize(ckpt, check_clip(y), self.target_bits, opts, self.granularity, self.steps,
                       self.candidate_bits, self.cap, self.tol)
        self.result_ = res
        self.config_ = res.allocation.config.bits
        self.bitstream_ = res.stream.raw
        self.psnr_ = res.point.psnr
        self.bpp_ = res.point.bpp
        self.fingerprint_ = ckpt.fingerprint()
        return self

    def transform(self, X) -> Checkpoint:
        check_is_fitted(self, "result_")
        ckpt = self._checkpoint(X)
        if ckpt.fingerprint() != self.fingerprint_:
            raise ValueError("transform got a different checkpoint than fit")
        return ckpt.with_weights(self.result_.model.dequantized(), quantized_config="-".join(map(str, self.config_)))
