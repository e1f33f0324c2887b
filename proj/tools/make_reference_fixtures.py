"""Writes small random-weight reference encoders and their tap outputs.

Each fixture holds the model state dict, an input image tensor under
"input", and one "expected.<tap>" entry per tap. Spatial taps are stored
flattened to [C, H*W].
"""

import argparse
import pathlib

import clip.model
import torch
import torchvision.models as tvm
from safetensors.torch import save_file


def randomize_bn(model, gen):
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.copy_(torch.randn(m.running_mean.shape, generator=gen) * 0.1)
            m.running_var.copy_(torch.rand(m.running_var.shape, generator=gen) + 0.5)
            m.weight.data.copy_(torch.rand(m.weight.shape, generator=gen) + 0.5)
            m.bias.data.copy_(torch.randn(m.bias.shape, generator=gen) * 0.1)


def flat(t):
    t = t.detach()[0]
    return t.reshape(t.shape[0], -1).contiguous() if t.dim() == 3 else t.reshape(1, -1).contiguous()


def resnet_fixture(gen):
    model = clip.model.ModifiedResNet(layers=(1, 2, 1, 1), output_dim=32, heads=2, input_resolution=64, width=8)
    randomize_bn(model, gen)
    model.eval()
    x = torch.randn(1, 3, 64, 64, generator=gen)
    taps = {}
    with torch.no_grad():
        h = model.stem(x) if hasattr(model, "stem") else None
        if h is None:
            h = x
            for conv, bn in [(model.conv1, model.bn1), (model.conv2, model.bn2), (model.conv3, model.bn3)]:
                h = torch.relu(bn(conv(h)))
            h = model.avgpool(h)
        for i in range(1, 5):
            h = getattr(model, f"layer{i}")(h)
            taps[f"layer{i}"] = flat(h)
        taps["base"] = flat(model.attnpool(h))
    return {"visual." + k: v for k, v in model.state_dict().items()}, x, taps


def vit_fixture(gen):
    model = clip.model.VisionTransformer(input_resolution=32, patch_size=8, width=32, layers=2, heads=4, output_dim=16)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 0.05)
    model.eval()
    x = torch.randn(1, 3, 32, 32, generator=gen)
    with torch.no_grad():
        h = model.conv1(x).reshape(1, 32, -1).permute(0, 2, 1)
        cls = model.class_embedding + torch.zeros(1, 1, 32)
        h = torch.cat([cls, h], dim=1) + model.positional_embedding
        h = model.ln_pre(h).permute(1, 0, 2)
        h = model.transformer(h).permute(1, 0, 2)
        pooled = model.ln_post(h[:, 0, :])
        taps = {"no-proj": pooled.contiguous(), "base": (pooled @ model.proj).contiguous()}
    return {"visual." + k: v for k, v in model.state_dict().items()}, x, taps


def mobilenet_fixture(name, gen):
    ctor = {"mobilenet_v2": tvm.mobilenet_v2, "mobilenet_v3_large": tvm.mobilenet_v3_large,
            "mobilenet_v3_small": tvm.mobilenet_v3_small}[name]
    model = ctor(weights=None, width_mult=0.25, num_classes=10)
    randomize_bn(model, gen)
    model.eval()
    x = torch.randn(1, 3, 64, 64, generator=gen)
    with torch.no_grad():
        f = model.features(x)
        taps = {"features": flat(f), "base": model(x).contiguous()}
    return dict(model.state_dict()), x, taps


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path(__file__).parent.parent / "tests" / "fixtures")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(1234)
    torch.manual_seed(1234)
    jobs = {
        "clip_resnet_tiny": lambda: resnet_fixture(gen),
        "clip_vit_tiny": lambda: vit_fixture(gen),
        "mobilenet_v2_tiny": lambda: mobilenet_fixture("mobilenet_v2", gen),
        "mobilenet_v3_large_tiny": lambda: mobilenet_fixture("mobilenet_v3_large", gen),
        "mobilenet_v3_small_tiny": lambda: mobilenet_fixture("mobilenet_v3_small", gen),
    }
    for name, job in jobs.items():
        sd, x, taps = job()
        tensors = {k: v.float().contiguous() for k, v in sd.items() if v.dtype.is_floating_point}
        tensors["input"] = x[0].reshape(3, -1).contiguous()
        for tap, v in taps.items():
            tensors["expected." + tap] = v.float()
        save_file(tensors, str(args.out / f"{name}.safetensors"))
        print(name, sum(t.numel() for t in tensors.values()))


if __name__ == "__main__":
    main()
