"""Vision-transformer loading, preprocessing, and per-layer feature capture."""

import numpy as np
import torch
from PIL import Image
from torchvision.models import ViT_B_16_Weights, vit_b_16

POOLINGS = ("cls_token", "mean")


class BackboneError(RuntimeError):
    pass


def load_backbone(model_id="vit_b_16", weights="pretrained", seed=0):
    """Build the transformer in eval mode.

    weights="pretrained" downloads the supervised checkpoint; "random" uses
    a seeded initialization so fully offline runs stay deterministic.
    """
    if model_id != "vit_b_16":
        raise BackboneError(f"unsupported model {model_id!r}")
    if weights == "pretrained":
        try:
            model = vit_b_16(weights=ViT_B_16_Weights.IMAGENET1K_V1)
        except Exception as err:
            raise BackboneError(
                "could not load pretrained weights (offline?); "
                "rerun with weights='random'"
            ) from err
    elif weights == "random":
        torch.manual_seed(seed)
        model = vit_b_16(weights=None)
    else:
        raise BackboneError(f"weights must be 'pretrained' or 'random', got {weights!r}")
    model.eval()
    return model


def preprocess(image_path, size=224):
    """Load an image, resize, and scale pixel values into [0, 1]."""
    with Image.open(image_path) as img:
        img = img.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def _pool(tokens, pooling):
    # tokens: (batch, 1 + patches, m) with the class token first
    if pooling == "cls_token":
        return tokens[:, 0, :]
    if pooling == "mean":
        return tokens[:, 1:, :].mean(dim=1)
    raise BackboneError(f"unknown pooling {pooling!r}")


def extract_layers(model, batch, pooling="cls_token"):
    """Pooled per-layer features for a preprocessed image batch.

    Hooks every encoder block in depth order and returns an array of shape
    (batch, num_layers, m), layer 1 first.
    """
    blocks = list(model.encoder.layers)
    captured = [None] * len(blocks)

    def hook(index):
        def fn(module, inputs, output):
            captured[index] = output.detach()

        return fn

    handles = [blk.register_forward_hook(hook(i)) for i, blk in enumerate(blocks)]
    try:
        with torch.no_grad():
            model(batch)
    finally:
        for h in handles:
            h.remove()
    if any(c is None for c in captured):
        raise BackboneError("an encoder block produced no output")
    pooled = [_pool(tokens, pooling) for tokens in captured]
    return torch.stack(pooled, dim=1).numpy()


def backbone_dims(model):
    """(num_layers, m) of the loaded transformer."""
    return len(model.encoder.layers), model.hidden_dim
