"""
Surrogate Model Bundle.

Groups the trained networks that stand in for the deployment dynamics: the
ReLU mean network, the diagonal log-variance network, the optional tanh state
embedder and the optional deep comparison network.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from shiftguard import relu_net
from shiftguard.errors import DimensionMismatchError
from shiftguard.gaussian import Ellipsoid, Gaussian, as_vector, confidence_ellipsoid, psd_sqrt
from shiftguard.relu_net import ReluNetwork

logger = logging.getLogger(__name__)

MODEL_FILES = {
    "mean_net": "mean.json",
    "cov_net": "cov.json",
    "embedder": "embedder.json",
    "deep_net": "deep.json",
}


@dataclass(frozen=True, eq=False)
class SurrogatePair:
    """
    Trained surrogates of the deployment dynamics.

    Attributes:
        mean_net: ReLU mean network on [features(s), a]
        cov_net: Log-variance network on [s, a], one output per state coordinate
        embedder: Optional tanh network mapping s to features(s)
        deep_net: Optional tanh comparison network on [s, a]
    """

    mean_net: ReluNetwork
    cov_net: ReluNetwork
    embedder: Optional[ReluNetwork] = None
    deep_net: Optional[ReluNetwork] = None

    def __post_init__(self):
        n = self.mean_net.output_dim
        if self.cov_net.output_dim != n:
            raise DimensionMismatchError(f"cov_net outputs {self.cov_net.output_dim} values, state dim is {n}")
        m = self.cov_net.input_dim - n
        if m < 1:
            raise DimensionMismatchError("cov_net input must be state dim plus action dim")
        feature_dim = n
        if self.embedder is not None:
            if self.embedder.input_dim != n:
                raise DimensionMismatchError(f"embedder input {self.embedder.input_dim} != state dim {n}")
            feature_dim = self.embedder.output_dim
        if self.mean_net.input_dim != feature_dim + m:
            raise DimensionMismatchError(
                f"mean_net input {self.mean_net.input_dim} != feature dim {feature_dim} + action dim {m}"
            )
        if self.deep_net is not None and (
            self.deep_net.input_dim != n + m or self.deep_net.output_dim != n
        ):
            raise DimensionMismatchError("deep_net must map [s, a] to a state")

    @property
    def state_dim(self) -> int:
        return self.mean_net.output_dim

    @property
    def action_dim(self) -> int:
        return self.cov_net.input_dim - self.state_dim

    def features(self, s) -> np.ndarray:
        s = as_vector(s, "state")
        return self.embedder.forward(s) if self.embedder is not None else s

    def predict_mean(self, s, a) -> np.ndarray:
        return self.mean_net.forward(np.concatenate([self.features(s), as_vector(a, "action")]))

    def predict_cov(self, s, a) -> np.ndarray:
        """Diagonal covariance exp(cov_net([s, a]))."""
        log_variance = self.cov_net.forward(np.concatenate([as_vector(s, "state"), as_vector(a, "action")]))
        return np.diag(np.exp(log_variance))

    def comparison_mean(self, s, a) -> np.ndarray:
        """Prediction of the deep comparison network, or of the mean network when absent."""
        if self.deep_net is None:
            return self.predict_mean(s, a)
        return self.deep_net.forward(np.concatenate([as_vector(s, "state"), as_vector(a, "action")]))

    def embed_region(self, g: Gaussian, p: float) -> Ellipsoid:
        """
        Confidence ellipsoid of a state Gaussian in feature coordinates.

        Without an embedder this is the ordinary confidence ellipsoid. With one,
        the Gaussian is pushed through the embedder by the unscented transform
        (2n symmetric sigma points) and the moment-matched Gaussian is used.

        Args:
            g: State distribution
            p: Confidence level

        Returns:
            Ellipsoid in the mean network's feature space
        """
        if self.embedder is None:
            return confidence_ellipsoid(g, p, regularize=True)
        n = g.dim
        spread = np.sqrt(n) * psd_sqrt(g.cov)
        sigma_points = np.vstack([g.mean + spread.T, g.mean - spread.T])
        images = self.embedder.predict(sigma_points)
        mean = images.mean(axis=0)
        offsets = images - mean
        cov = offsets.T @ offsets / sigma_points.shape[0]
        return confidence_ellipsoid(Gaussian(mean, 0.5 * (cov + cov.T)), p, regularize=True)

    def save_dir(self, path: Union[str, Path]):
        """Write one JSON file per present network into ``path``."""
        path = Path(path)
        for attribute, filename in MODEL_FILES.items():
            net = getattr(self, attribute)
            if net is not None:
                relu_net.save(net, path / filename)

    @classmethod
    def load_dir(cls, path: Union[str, Path]) -> "SurrogatePair":
        path = Path(path)
        networks = {}
        for attribute, filename in MODEL_FILES.items():
            file = path / filename
            if file.exists():
                networks[attribute] = relu_net.load(file)
            elif attribute in ("mean_net", "cov_net"):
                raise FileNotFoundError(f"missing surrogate file {file}")
        logger.info(f"Loaded surrogates {sorted(networks)} from {path}")
        return cls(**networks)
