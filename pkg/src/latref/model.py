"""Full grounding model: embed, generate latent expressions, encode, project,
and fuse probability maps.

With use_latent=False the model degrades to the plain visual/text baseline:
no subject selection, no latent streams, no concept bank, and the fused map is
the text map alone.
"""

import torch
import torch.nn as nn

from .embeddings import InputEmbedder
from .encoder import Encoder
from .latent_init import LatentInitializer
from .objectives import EmptyPredictor, FeatureUpsampler, ProjectionHeads, fuse_probability_maps


class GroundingModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.embedder = InputEmbedder(config)
        self.latent_init = LatentInitializer(config) if config.use_latent else None
        self.encoder = Encoder(config)
        self.upsampler = FeatureUpsampler(config)
        self.heads = ProjectionHeads(config.d, with_latent=config.use_latent)
        self.empty_predictor = EmptyPredictor(config.d) if config.gres_enabled else None
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, images, token_ids, lengths, collect=False):
        """Returns a dict with the final embeddings, fused probability map,
        per-expression sigmoid maps, projections, and optional diagnostics."""
        embeds = self.embedder(images, token_ids, lengths)
        selection = None
        if self.latent_init is not None:
            embeds, selection = self.latent_init(embeds, training=self.training)
        embeds, diag = self.encoder(embeds, collect=collect)

        features = self.upsampler(embeds.visual[:, 1:])       # [B, h, w, d]
        B, h, w, d = features.shape
        flat = features.reshape(B, h * w, d)
        t_o, z_o = self.heads(embeds)
        fused, per_maps = fuse_probability_maps(flat, t_o, z_o)

        out = {
            "embeds": embeds,
            "selection": selection,
            "probs": fused.reshape(B, h, w),
            "per_maps": [m.reshape(B, h, w) for m in per_maps],
            "text_proj": t_o,
            "latent_projs": z_o,
            "diag": diag,
        }
        if self.empty_predictor is not None:
            out["empty_logits"] = self.empty_predictor(embeds)
        return out


def build_model(config, dtype=torch.float32):
    from .config import seed_all
    seed_all(config.seed)
    model = GroundingModel(config)
    if dtype is not None:
        model = model.to(dtype)
    return model
