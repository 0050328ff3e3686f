"""Token-stream container and the image/text input embedder."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ShapeMismatch, VocabOverflow


@dataclass
class EmbeddingSet:
    """The three token streams flowing through the encoder.

    visual:    [B, n+1, d], row 0 is the visual class/subject slot
    textual:   [B, m_max+1, d], row 0 is the text class token
    text_mask: [B, m_max+1] bool, True where the position is a real token
    latents:   list of N tensors [B, k_i+2, d]; rows 0/1 are class/subject,
               the remaining k_i rows are attribute tokens
    """

    visual: torch.Tensor
    textual: torch.Tensor
    text_mask: torch.Tensor
    latents: list = field(default_factory=list)

    @property
    def batch(self):
        return self.visual.shape[0]

    def clone(self):
        return EmbeddingSet(
            visual=self.visual.clone(),
            textual=self.textual.clone(),
            text_mask=self.text_mask.clone(),
            latents=[z.clone() for z in self.latents],
        )

    def stream_sizes(self):
        return [self.visual.shape[1], self.textual.shape[1]] + [z.shape[1] for z in self.latents]

    def concat(self):
        """Rows of all streams in order [V, T, Z^1, ..., Z^N] plus the key mask."""
        parts = [self.visual, self.textual] + list(self.latents)
        x = torch.cat(parts, dim=1)
        ones_v = torch.ones(self.batch, self.visual.shape[1], dtype=torch.bool,
                            device=x.device)
        masks = [ones_v, self.text_mask]
        for z in self.latents:
            masks.append(torch.ones(self.batch, z.shape[1], dtype=torch.bool, device=x.device))
        return x, torch.cat(masks, dim=1)

    def split(self, x):
        """Inverse of concat for a tensor with the same row layout."""
        sizes = self.stream_sizes()
        parts = torch.split(x, sizes, dim=1)
        return EmbeddingSet(
            visual=parts[0],
            textual=parts[1],
            text_mask=self.text_mask,
            latents=list(parts[2:]),
        )


class InputEmbedder(nn.Module):
    """Non-overlapping patch projection + token lookup, both with learned
    class rows and learned index-only positional embeddings."""

    def __init__(self, config):
        super().__init__()
        d, p = config.d, config.patch_size
        self.patch_size = p
        self.image_hw = config.image_hw
        self.m_max = config.m_max
        self.vocab_size = config.vocab_size

        self.patch_proj = nn.Conv2d(3, d, kernel_size=p, stride=p)
        self.visual_cls = nn.Parameter(torch.zeros(d))
        self.visual_pos = nn.Parameter(torch.zeros(config.n_patches + 1, d))
        self.token_emb = nn.Embedding(config.vocab_size, d)
        self.text_cls = nn.Parameter(torch.zeros(d))
        self.text_pos = nn.Parameter(torch.zeros(config.m_max + 1, d))

        nn.init.trunc_normal_(self.visual_cls, std=0.02)
        nn.init.trunc_normal_(self.visual_pos, std=0.02)
        nn.init.trunc_normal_(self.text_cls, std=0.02)
        nn.init.trunc_normal_(self.text_pos, std=0.02)
        nn.init.trunc_normal_(self.token_emb.weight, std=0.02)

    def forward(self, images, token_ids, lengths):
        """images [B, 3, H, W] in [0,1]; token_ids [B, m_max] long (0-padded);
        lengths [B] long. Returns an EmbeddingSet with empty latents."""
        B, _, H, W = images.shape
        if H != self.image_hw or W != self.image_hw or H % self.patch_size or W % self.patch_size:
            raise ShapeMismatch(f"image {H}x{W} does not divide into {self.patch_size}px patches "
                                f"of a {self.image_hw}px input")
        if token_ids.shape[1] != self.m_max:
            raise ShapeMismatch(f"token_ids must be padded to m_max={self.m_max}")
        if int(lengths.max()) > self.m_max:
            raise ShapeMismatch("token sequence longer than m_max")

        pos = torch.arange(self.m_max, device=token_ids.device)
        active = pos[None, :] < lengths[:, None]                     # [B, m_max]
        if active.any():
            ids = token_ids[active]
            if int(ids.max()) >= self.vocab_size or int(ids.min()) < 0:
                raise VocabOverflow("token id outside vocabulary")

        patches = self.patch_proj(images.to(self.patch_proj.weight.dtype))
        patches = patches.flatten(2).transpose(1, 2)                 # [B, n, d]
        visual = torch.cat([self.visual_cls.expand(B, 1, -1), patches], dim=1)
        visual = visual + self.visual_pos

        words = self.token_emb(token_ids.clamp(min=0)) + self.text_pos[1:]
        words = words * active.unsqueeze(-1)                         # padded rows exactly zero
        cls = (self.text_cls + self.text_pos[0]).expand(B, 1, -1)
        textual = torch.cat([cls, words], dim=1)

        mask = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=active.device), active], dim=1)
        return EmbeddingSet(visual=visual, textual=textual, text_mask=mask, latents=[])
