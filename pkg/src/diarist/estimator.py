"""Scikit-learn style facade over the training and inference stack.

``SpeakerDiarizer`` is a fit/predict estimator: X is a list of FrameMatrix
feature recordings, y a list of reference Annotations.  Constructor
arguments follow scikit-learn conventions (stored verbatim, validated in
``fit``), so ``get_params``/``set_params``/``clone`` and the model-selection
utilities work out of the box.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .core import Annotation, FrameMatrix
from .metrics import der_corpus
from .pipeline import PipelineParams, run_pipeline
from .segmentation import ModelConfig, build_model
from .training import TrainConfig, make_windows, train_segmentation
from .validation import check_features, check_paired_lists


class SpeakerDiarizer(BaseEstimator):
    """End-to-end diarization estimator.

    Training fits the local segmentation network on fixed windows cut from
    the labeled recordings; prediction runs sliding-window inference with
    embedding clustering.  ``score`` returns the negative macro DER so that
    higher is better, as model-selection tooling expects.
    """

    def __init__(
        self,
        processing: str = "mamba",
        window: float = 10.0,
        num_speakers: int = 3,
        max_overlap: int = 2,
        loss_type: str = "powerset",
        d_model: int = 64,
        n_blocks: int = 2,
        d_state: int = 16,
        lstm_layers: int = 4,
        lstm_hidden: int = 128,
        epochs: int = 4,
        steps_per_epoch: int = 50,
        batch: int = 8,
        lr_peak: float = 0.002,
        hop: float | None = None,
        clustering_threshold: float = 0.5,
        min_cluster_size: int = 1,
        min_embed_duration: float = 0.2,
        embedder=None,
        seed: int = 0,
    ):
        self.processing = processing
        self.window = window
        self.num_speakers = num_speakers
        self.max_overlap = max_overlap
        self.loss_type = loss_type
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.d_state = d_state
        self.lstm_layers = lstm_layers
        self.lstm_hidden = lstm_hidden
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch = batch
        self.lr_peak = lr_peak
        self.hop = hop
        self.clustering_threshold = clustering_threshold
        self.min_cluster_size = min_cluster_size
        self.min_embed_duration = min_embed_duration
        self.embedder = embedder
        self.seed = seed

    # ------------------------------------------------------------------

    def _model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(
            processing=self.processing,
            window=self.window,
            num_speakers=self.num_speakers,
            max_overlap=self.max_overlap,
            loss_type=self.loss_type,
            feature_dim=feature_dim,
            d_model=self.d_model,
            n_blocks=self.n_blocks,
            d_state=self.d_state,
            lstm_layers=self.lstm_layers,
            lstm_hidden=self.lstm_hidden,
        )

    def _pipeline_params(self) -> PipelineParams:
        return PipelineParams(
            hop=self.hop,
            clustering_threshold=self.clustering_threshold,
            min_cluster_size=self.min_cluster_size,
            min_embed_duration=self.min_embed_duration,
        )

    def fit(self, X, y, X_val=None, y_val=None) -> "SpeakerDiarizer":
        """Train the segmentation network on labeled recordings.

        Without an explicit validation split, the last recording (at least
        one, at most 20%) is held out for checkpoint selection.
        """
        X, y = check_paired_lists(X, y)
        if X_val is None:
            n_val = max(1, len(X) // 5) if len(X) > 1 else 0
            if n_val == 0:
                X_val, y_val = X, y  # single recording: validate on it
            else:
                X, X_val = X[:-n_val], X[-n_val:]
                y, y_val = y[:-n_val], y[-n_val:]
        else:
            X_val, y_val = check_paired_lists(X_val, y_val)

        config = self._model_config(feature_dim=X[0].num_channels)
        train_windows = []
        for feats, ann in zip(X, y):
            train_windows.extend(make_windows(feats, ann, self.window, self.num_speakers))
        val_windows = []
        for feats, ann in zip(X_val, y_val):
            val_windows.extend(make_windows(feats, ann, self.window, self.num_speakers))

        model = build_model(config, seed=self.seed)
        train_config = TrainConfig(
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            batch=self.batch,
            lr_peak=self.lr_peak,
            seed=self.seed,
        )
        self.model_, self.history_ = train_segmentation(
            model, train_windows, val_windows, train_config
        )
        return self

    def predict(self, X):
        """Diarize recordings; a bare FrameMatrix yields a bare Annotation."""
        if not hasattr(self, "model_"):
            raise RuntimeError("this SpeakerDiarizer instance is not fitted yet")
        single = isinstance(X, FrameMatrix)
        recs = [X] if single else list(X)
        params = self._pipeline_params()
        out = [
            run_pipeline(
                check_features(feats, f"X[{i}]"),
                self.model_,
                params,
                embedder=self.embedder,
                recording_id=f"rec{i}",
            )
            for i, feats in enumerate(recs)
        ]
        return out[0] if single else out

    def score(self, X, y, collar: float = 0.0) -> float:
        """Negative macro-averaged DER of the predictions against y."""
        X, y = check_paired_lists(X, y)
        hyps = self.predict(X)
        pairs = {}
        for i, (ref, hyp) in enumerate(zip(y, hyps)):
            rec_id = ref.recording_id or f"rec{i}"
            hyp = Annotation(rec_id, hyp.segments)
            pairs[rec_id] = (ref, hyp)
        _, macro = der_corpus(pairs, collar=collar)
        return -macro
