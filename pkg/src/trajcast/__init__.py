"""Multi-agent trajectory forecasting with a shared autoregressive latent space."""

__all__ = ["TrajectoryForecaster"]
__version__ = "0.1.0"


def __getattr__(name):
    # keep `import trajcast` light; the estimator pulls in the full stack
    if name == "TrajectoryForecaster":
        from trajcast.forecaster import TrajectoryForecaster

        return TrajectoryForecaster
    raise AttributeError(name)
