"""Converts an OpenAI CLIP checkpoint (.pt) or torchvision MobileNet weights
to the safetensors layout read by `featinv --weights`.

    python tools/convert_clip_weights.py RN50.pt clip-rn50.safetensors
    python tools/convert_clip_weights.py --torchvision mobilenet_v2 mobilenet-v2.safetensors

Only floating-point visual-tower tensors are kept, stored as f32.
"""

import argparse

import torch
from safetensors.torch import save_file


def clip_state(path):
    import clip

    model, _ = clip.load(path, device="cpu", jit=False)
    return {k: v for k, v in model.state_dict().items() if k.startswith("visual.")}


def torchvision_state(name):
    import torchvision.models as tvm

    ctor = getattr(tvm, name)
    return ctor(weights="DEFAULT").state_dict()


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", nargs="?", help="CLIP .pt file or model name (e.g. RN50, ViT-B/32)")
    ap.add_argument("out")
    ap.add_argument("--torchvision", metavar="NAME", help="torchvision model instead of CLIP")
    args = ap.parse_args()
    if not args.source and not args.torchvision:
        ap.error("give a CLIP source or --torchvision NAME")
    sd = torchvision_state(args.torchvision) if args.torchvision else clip_state(args.source)
    tensors = {k: v.float().contiguous() for k, v in sd.items() if v.dtype.is_floating_point}
    save_file(tensors, args.out)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
