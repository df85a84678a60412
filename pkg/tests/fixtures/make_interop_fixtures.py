"""Regenerate the interoperability fixtures with the reference safetensors writer.

Run from this directory: ``python make_interop_fixtures.py``. Needs the
``safetensors`` and ``torch`` packages; the tests only need the output files.

Values follow closed forms that are exact in every dtype used:
base[k] = ((k % 97) - 48) / 64 and post[k] = base[k] + ((k % 13) - 6) / 256.
"""

import numpy as np
import torch
from safetensors.numpy import save_file as save_numpy
from safetensors.torch import save_file as save_torch

SHAPES = {
    "model.embed_tokens.weight": (16, 8),
    "model.layers.0.self_attn.q_proj.weight": (8, 8),
    "model.layers.0.mlp.up_proj.weight": (12, 8),
    "model.norm.weight": (8,),
}


def base_values(shape):
    k = np.arange(int(np.prod(shape)), dtype=np.float64)
    return (((k % 97) - 48) / 64).reshape(shape)


def post_values(shape):
    k = np.arange(int(np.prod(shape)), dtype=np.float64)
    return base_values(shape) + (((k % 13) - 6) / 256).reshape(shape)


def main():
    meta = {"format": "pt"}
    for which, fn in (("base", base_values), ("post", post_values)):
        save_numpy({n: fn(s).astype(np.float32) for n, s in SHAPES.items()}, f"interop_{which}_f32.safetensors", metadata=meta)
        save_numpy({n: fn(s).astype(np.float16) for n, s in SHAPES.items()}, f"interop_{which}_f16.safetensors", metadata=meta)
        save_torch(
            {n: torch.from_numpy(fn(s).astype(np.float32)).to(torch.bfloat16) for n, s in SHAPES.items()},
            f"interop_{which}_bf16.safetensors",
            metadata=meta,
        )


if __name__ == "__main__":
    main()
