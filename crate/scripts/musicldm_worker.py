#!/usr/bin/env python3
"""Checkpoint worker for the scorediff checkpoint adapters.

Speaks one JSON object per line on stdin/stdout. Tensors travel as base64
little-endian float32 in (channel, time, frequency) order.

    python3 scripts/musicldm_worker.py            # MusicLDM via diffusers
    python3 scripts/musicldm_worker.py --fake     # dependency-free stand-in for tests

Worker options (the adapter's `options` object):
    guidance_scale   classifier-free guidance weight, default 1.0 (off)
    dtype            "float32" (default) or "float16"
"""

import base64
import json
import math
import struct
import sys

LATENT_SHAPE = [8, 256, 16]
EMBEDDING_DIM = 512
SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = 625


def f32_encode(values):
    return base64.b64encode(struct.pack("<%df" % len(values), *values)).decode("ascii")


def f32_decode(text):
    raw = base64.b64decode(text)
    return list(struct.unpack("<%df" % (len(raw) // 4), raw))


class FakeModel:
    """Deterministic arithmetic with the checkpoint's geometry. No ML involved."""

    name = "fake-worker/v1"

    def __init__(self, checkpoint, device, options):
        pass

    def encode(self, text):
        h = 0xCBF29CE484222325
        for b in text.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return [math.sin(h % 1000 + i) for i in range(EMBEDDING_DIM)]

    def predict_noise(self, latent, shape, timestep, num_steps, alpha_bar, conditioning):
        scale = math.sqrt(1.0 - alpha_bar)
        return [scale * x for x in latent]

    def decode(self, latent, shape):
        c, t, f = shape
        out = []
        for frame in range(t):
            level = math.tanh(sum(latent[frame * f:(frame + 1) * f]) / f)
            out.extend([level] * SAMPLES_PER_FRAME)
        return out


class MusicLdmModel:
    """MusicLDM UNet, CLAP text encoder, VAE and HiFi-GAN vocoder from a diffusers checkpoint."""

    def __init__(self, checkpoint, device, options):
        import torch
        from diffusers import MusicLDMPipeline

        self.torch = torch
        dtype = torch.float16 if options.get("dtype") == "float16" else torch.float32
        self.pipe = MusicLDMPipeline.from_pretrained(checkpoint, torch_dtype=dtype).to(device)
        self.device = device
        self.dtype = dtype
        self.guidance = float(options.get("guidance_scale", 1.0))
        self.alphas = self.pipe.scheduler.alphas_cumprod.to(torch.float64)
        self.sample_rate = int(self.pipe.vocoder.config.sampling_rate)
        self.name = "musicldm/" + str(getattr(self.pipe.unet.config, "_name_or_path", checkpoint))
        self._uncond = None

    def geometry(self):
        unet = self.pipe.unet.config
        vae_scale = 2 ** (len(self.pipe.vae.config.block_out_channels) - 1)
        mel_bins = self.pipe.vocoder.config.model_in_dim
        return [unet.in_channels, LATENT_SHAPE[1], mel_bins // vae_scale]

    def _text_features(self, text):
        torch = self.torch
        tok = self.pipe.tokenizer(
            text,
            padding="max_length",
            max_length=self.pipe.tokenizer.model_max_length,
            truncation=True,
            return_tensors="pt",
        )
        with torch.no_grad():
            feats = self.pipe.text_encoder.get_text_features(
                tok.input_ids.to(self.device), attention_mask=tok.attention_mask.to(self.device)
            )
        return feats[0].float().cpu()

    def encode(self, text):
        return self._text_features(text).tolist()

    def predict_noise(self, latent, shape, timestep, num_steps, alpha_bar, conditioning):
        torch = self.torch
        # The adapter's schedule need not match the checkpoint's: use the
        # native timestep whose cumulative alpha is closest.
        native = int(torch.argmin((self.alphas - alpha_bar).abs()).item())
        x = torch.tensor(latent, dtype=self.dtype, device=self.device).reshape(1, *shape)
        v = torch.tensor(conditioning, dtype=self.dtype, device=self.device).reshape(1, -1)
        t = torch.tensor([native], device=self.device)
        with torch.no_grad():
            eps = self.pipe.unet(x, t, encoder_hidden_states=None, class_labels=v).sample
            if self.guidance != 1.0:
                if self._uncond is None:
                    u = self._text_features("")
                    self._uncond = (u / u.norm()).to(self.device, self.dtype).reshape(1, -1)
                eps_u = self.pipe.unet(x, t, encoder_hidden_states=None, class_labels=self._uncond).sample
                eps = eps_u + self.guidance * (eps - eps_u)
        return eps.float().flatten().cpu().tolist()

    def decode(self, latent, shape):
        torch = self.torch
        z = torch.tensor(latent, dtype=self.dtype, device=self.device).reshape(1, *shape)
        with torch.no_grad():
            mel = self.pipe.vae.decode(z / self.pipe.vae.config.scaling_factor).sample
            audio = self.pipe.mel_spectrogram_to_waveform(mel)
        samples = audio[0].float().cpu().tolist()
        want = shape[1] * SAMPLES_PER_FRAME
        if len(samples) < want:
            raise ValueError("vocoder produced %d samples, need %d" % (len(samples), want))
        return samples[:want]


def handle(model, request):
    op = request.get("op")
    if op == "encode":
        return {"vector": f32_encode(model.encode(request["text"]))}
    if op == "predict_noise":
        eps = model.predict_noise(
            f32_decode(request["latent"]),
            request["shape"],
            request["timestep"],
            request["num_steps"],
            request["alpha_bar"],
            f32_decode(request["conditioning"]),
        )
        return {"noise": f32_encode(eps)}
    if op == "decode":
        return {"samples": f32_encode(model.decode(f32_decode(request["latent"]), request["shape"]))}
    raise ValueError("unknown op %r" % op)


def reply(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main(argv):
    fake = "--fake" in argv
    model = None
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            request = json.loads(line)
            if request.get("op") == "hello":
                cls = FakeModel if fake else MusicLdmModel
                model = cls(request.get("checkpoint"), request.get("device", "cpu"), request.get("options") or {})
                shape = model.geometry() if hasattr(model, "geometry") else LATENT_SHAPE
                reply({
                    "ok": True,
                    "latent_shape": shape,
                    "embedding_dim": len(model.encode("probe")),
                    "sample_rate": getattr(model, "sample_rate", SAMPLE_RATE),
                    "samples_per_latent_frame": SAMPLES_PER_FRAME,
                    "model": model.name,
                })
                continue
            if model is None:
                raise ValueError("send hello first")
            out = handle(model, request)
            out["ok"] = True
            reply(out)
        except Exception as e:  # reported to the adapter, which turns it into a backend error
            reply({"ok": False, "error": "%s: %s" % (type(e).__name__, e)})
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
