"""Plaintext CNN: model definition, training (optionally DP-SGD) and privacy accounting."""


from ..he_layers import FrozenWeights
from .model import (ForwardPass, LayerSpec, ModelSpec, ModelState, accuracy, backward, bce_loss,
                    check_state, client_spec, forward, init_state, loss, predict, server_spec)
from .privacy import DpConfig, PrivacyReport, account_epsilon, rdp_subsampled_gaussian
from .train import (TrainConfig, TrainResult, dpsgd_step, finetune_client, fit, mean_gradients,
                    sgd_step, train_source)


def frozen_weights(state: ModelState, spec: ModelSpec) -> FrozenWeights:
    """The frozen prefix (conv, dense, pool, dropout, dense) of a server model."""
    kinds = [layer.kind for layer in spec.layers[: spec.frozen]]
    if kinds != ["conv1d", "dense", "avgpool", "dropout", "dense"]:
        raise ValueError("model does not have the server frozen prefix")
    if spec.layers[1].activation != "relu_approx" or spec.layers[4].activation != "linear":
        raise ValueError("frozen prefix activations must be relu_approx and linear")
    p = state.params
    return FrozenWeights(conv_w=p[0]["w"].copy(), conv_b=float(p[0]["b"][0]),
                         w1=p[1]["W"].copy(), b1=p[1]["b"].copy(),
                         w2=p[4]["W"].copy(), b2=p[4]["b"].copy(), pool=spec.layers[2].size)


__all__ = [
    "ForwardPass", "LayerSpec", "ModelSpec", "ModelState", "accuracy", "backward", "bce_loss",
    "check_state", "client_spec", "forward", "init_state", "loss", "predict", "server_spec",
    "DpConfig", "PrivacyReport", "account_epsilon", "rdp_subsampled_gaussian", "TrainConfig",
    "TrainResult", "dpsgd_step", "finetune_client", "fit", "mean_gradients", "sgd_step",
    "train_source", "frozen_weights",
]
