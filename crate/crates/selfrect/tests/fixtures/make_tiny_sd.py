"""Writes a tiny randomly initialised SD-v1-topology model in diffusers layout
plus reference outputs computed with diffusers/transformers.

    python3 make_tiny_sd.py [out_dir]

Weights are rounded to f16 before the references are computed and stored
as f16, so the Rust loader sees exactly the values torch used.
"""

import json
import os
import sys

import torch
from diffusers import AutoencoderKL, UNet2DConditionModel
from safetensors.torch import save_file
from transformers import CLIPTextConfig, CLIPTextModel

torch.manual_seed(1234)
OUT = sys.argv[1] if len(sys.argv) > 1 else os.path.join(os.path.dirname(__file__), "tiny-sd")
BOS, EOS = 998, 999


def perturb_norms(model):
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "norm" in name:
                if name.endswith("weight"):
                    p.copy_(1.0 + 0.1 * torch.randn_like(p))
                else:
                    p.copy_(0.1 * torch.randn_like(p))
            elif name.endswith("bias"):
                p.copy_(0.05 * torch.randn_like(p))


def round_f16(model):
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(p.half().float())


def save_component(model, sub, filename, config):
    d = os.path.join(OUT, sub)
    os.makedirs(d, exist_ok=True)
    tensors = {k: v.detach().half().contiguous() for k, v in model.state_dict().items()}
    save_file(tensors, os.path.join(d, filename))
    with open(os.path.join(d, "config.json"), "w") as f:
        json.dump(config, f, indent=2, default=list)


unet = UNet2DConditionModel(
    sample_size=8,
    in_channels=4,
    out_channels=4,
    down_block_types=("CrossAttnDownBlock2D",) * 3 + ("DownBlock2D",),
    up_block_types=("UpBlock2D",) + ("CrossAttnUpBlock2D",) * 3,
    block_out_channels=(32, 32, 64, 64),
    layers_per_block=2,
    norm_num_groups=8,
    cross_attention_dim=32,
    attention_head_dim=2,
).eval()
vae = AutoencoderKL(
    in_channels=3,
    out_channels=3,
    down_block_types=("DownEncoderBlock2D",) * 4,
    up_block_types=("UpDecoderBlock2D",) * 4,
    block_out_channels=(16, 16, 32, 32),
    layers_per_block=1,
    norm_num_groups=8,
    latent_channels=4,
    sample_size=64,
).eval()
clip_cfg = CLIPTextConfig(
    vocab_size=1000,
    hidden_size=32,
    intermediate_size=64,
    num_hidden_layers=2,
    num_attention_heads=2,
    max_position_embeddings=77,
    hidden_act="quick_gelu",
    bos_token_id=BOS,
    eos_token_id=EOS,
    pad_token_id=EOS,
)
clip = CLIPTextModel(clip_cfg).eval()

for m in (unet, vae, clip):
    perturb_norms(m)
    round_f16(m)

save_component(unet, "unet", "diffusion_pytorch_model.safetensors", dict(unet.config))
save_component(vae, "vae", "diffusion_pytorch_model.safetensors", dict(vae.config))
save_component(clip, "text_encoder", "model.safetensors", clip_cfg.to_dict())
os.makedirs(os.path.join(OUT, "tokenizer"), exist_ok=True)
with open(os.path.join(OUT, "tokenizer", "vocab.json"), "w") as f:
    json.dump({"<|startoftext|>": BOS, "<|endoftext|>": EOS}, f)
os.makedirs(os.path.join(OUT, "scheduler"), exist_ok=True)
with open(os.path.join(OUT, "scheduler", "scheduler_config.json"), "w") as f:
    json.dump(
        {
            "_class_name": "DDIMScheduler",
            "beta_start": 0.00085,
            "beta_end": 0.012,
            "beta_schedule": "scaled_linear",
            "num_train_timesteps": 1000,
            "steps_offset": 1,
            "set_alpha_to_one": False,
            "clip_sample": False,
        },
        f,
        indent=2,
    )


class Tap:
    """Records or replaces the keys and values of a self-attention layer."""

    def __init__(self):
        self.mode = None
        self.kv = None

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kw):
        q = attn.to_q(hidden_states)
        if self.mode == "inject":
            k, v = self.kv
        else:
            k = attn.to_k(hidden_states)
            v = attn.to_v(hidden_states)
            if self.mode == "record":
                self.kv = (k.detach().clone(), v.detach().clone())
        qh, kh, vh = (attn.head_to_batch_dim(x) for x in (q, k, v))
        probs = attn.get_attention_scores(qh, kh, None)
        out = attn.batch_to_head_dim(torch.bmm(probs, vh))
        return attn.to_out[1](attn.to_out[0](out))


def self_attention_layers(unet):
    blocks = list(unet.down_blocks) + [unet.mid_block] + list(unet.up_blocks)
    layers = []
    for b in blocks:
        for t in getattr(b, "attentions", []) or []:
            for tb in t.transformer_blocks:
                layers.append(tb.attn1)
    return layers


sites = self_attention_layers(unet)
taps = [Tap() for _ in sites]
for layer, tap in zip(sites, taps):
    layer.set_processor(tap)

refs = {}
with torch.no_grad():
    ids = torch.tensor([[BOS] + [EOS] * 76])
    ctx = clip(input_ids=ids).last_hidden_state
    refs["context"] = ctx[0]

    img = torch.rand(1, 3, 64, 64)
    img = 0.5 + 0.4 * torch.sin(6.0 * img) * img  # some structure, stays in [0, 1]
    refs["image"] = img[0].permute(1, 2, 0).contiguous()
    z_img = vae.encode(2 * img - 1).latent_dist.mode() * vae.config.scaling_factor
    refs["encoded"] = z_img[0]
    z = torch.randn(1, 4, 8, 8)
    refs["latent"] = z[0]
    refs["decoded"] = vae.decode(z / vae.config.scaling_factor).sample[0]

    t = torch.tensor([501])
    for tap in taps:
        tap.mode = None
    refs["eps_plain"] = unet(z, t, encoder_hidden_states=ctx).sample[0]

    for tap in taps:
        tap.mode = "record"
    refs["eps_record"] = unet(z, t, encoder_hidden_states=ctx).sample[0]
    for i, tap in enumerate(taps):
        refs[f"keys.{i}"] = tap.kv[0][0]
        refs[f"values.{i}"] = tap.kv[1][0]

    donor = torch.randn(1, 4, 8, 8)
    refs["donor"] = donor[0]
    t_donor = torch.tensor([801])
    for tap in taps:
        tap.mode = "record"
    unet(donor, t_donor, encoder_hidden_states=ctx)
    for i, tap in enumerate(taps):
        tap.mode = "inject" if 10 <= i <= 15 else None
    refs["eps_injected"] = unet(z, t, encoder_hidden_states=ctx).sample[0]

save_file({k: v.float().contiguous() for k, v in refs.items()}, os.path.join(OUT, "reference.safetensors"))
print(f"{len(sites)} self-attention sites; wrote {OUT}")
