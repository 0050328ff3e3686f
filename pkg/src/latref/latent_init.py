"""Initial latent expression construction from the text token stream.

Each expression is built as [class, subject, attributes]: attribute tokens come
from a token-level dropout followed by a learned length transform, and the
subject token is picked from the text tokens with a straight-through
Gumbel-softmax and installed into both the latent and visual streams.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ShapeMismatch


@dataclass
class SubjectSelection:
    index: torch.Tensor         # [B] long, position of the chosen word token
    hard_weights: torch.Tensor  # [B, m] exactly one-hot
    soft_weights: torch.Tensor  # [B, m] probabilities, the gradient carrier
    subject: torch.Tensor       # [B, d] selected embedding


def semantic_dropout(tokens, p, training, elementwise=False, return_mask=False):
    """Zero whole token rows independently with probability p (training only).

    tokens: [..., m, d]. No 1/(1-p) rescaling is applied; inference is the
    identity since all drop probabilities are zero there.
    """
    if not training or p == 0.0:
        keep = torch.ones_like(tokens) if elementwise else torch.ones_like(tokens[..., :1])
        out = tokens
    else:
        shape = tokens.shape if elementwise else tokens.shape[:-1] + (1,)
        keep = (torch.rand(shape, device=tokens.device, dtype=tokens.dtype) >= p)
        keep = keep.to(tokens.dtype)
        out = tokens * keep
    if return_mask:
        return out, keep
    return out


def length_transform(tokens, phi):
    """Map m token rows to k rows: phi[:, :m] @ tokens.

    tokens: [..., m, d]; phi: [k, m_max] with m <= m_max. Padded token rows
    must already be zero, which makes using the full phi equivalent to its
    leading m columns.
    """
    m = tokens.shape[-2]
    if m > phi.shape[1]:
        raise ShapeMismatch(f"{m} tokens exceed the {phi.shape[1]}-column length transform")
    return phi[:, :m] @ tokens


def gumbel_noise_like(logits):
    u = torch.rand_like(logits).clamp_(1e-9, 1.0 - 1e-9)
    return -torch.log(-torch.log(u))


def select_subject(tokens, selector, active=None, temperature=1.0, training=False,
                   hard=True, noise=True):
    """Pick one word token per sample as the subject.

    tokens: [B, m, d]; selector: nn.Linear(d, 1); active: [B, m] bool mask of
    real tokens (None means all active). Training adds Gumbel noise; the
    forward value uses the hard one-hot pick while gradients flow through the
    softmax weights (straight-through). With hard=False the soft weights are
    used directly in the forward pass as well.
    """
    logits = selector(tokens).squeeze(-1)                  # [B, m]
    if active is not None:
        logits = logits.masked_fill(~active, float("-inf"))
    if training and noise:
        g = gumbel_noise_like(logits)
        if active is not None:
            g = g.masked_fill(~active, 0.0)
        logits = logits + g
    soft = torch.softmax(logits / temperature, dim=-1)
    index = logits.argmax(dim=-1)
    hard_w = torch.zeros_like(soft).scatter_(-1, index.unsqueeze(-1), 1.0)
    weights = (hard_w - soft).detach() + soft if hard else soft
    subject = torch.einsum("bm,bmd->bd", weights, tokens)
    return SubjectSelection(index=index, hard_weights=hard_w, soft_weights=soft,
                            subject=subject)


def install_visual_subject(visual, subject):
    """Replace the visual class row with the subject token; rows 1..n unchanged."""
    return torch.cat([subject.unsqueeze(1), visual[:, 1:]], dim=1)


class LatentInitializer(nn.Module):
    """Owns the per-expression parameters: length transforms, latent class
    tokens, attribute positional embeddings, and the subject selector."""

    def __init__(self, config):
        super().__init__()
        self.k_list = config.k_list
        self.p_drop_list = config.p_drop_list
        self.elementwise = config.elementwise_dropout
        self.temperature = config.gumbel_temperature
        self.hard = config.gumbel_hard
        self.noise = config.gumbel_noise
        d = config.d

        self.selector = nn.Linear(d, 1)
        self.phis = nn.ParameterList(
            nn.Parameter(torch.empty(k, config.m_max)) for k in config.k_list)
        self.latent_cls = nn.ParameterList(
            nn.Parameter(torch.zeros(d)) for _ in config.k_list)
        self.attr_pos = nn.ParameterList(
            nn.Parameter(torch.zeros(k, d)) for k in config.k_list)
        for phi in self.phis:
            nn.init.trunc_normal_(phi, std=0.5)
        for p in list(self.latent_cls) + list(self.attr_pos):
            nn.init.trunc_normal_(p, std=0.02)

    def forward(self, embeds, training):
        """Build N latent expressions from the embedded text stream and install
        the subject into the visual stream. Returns (embeds, selection)."""
        words = embeds.textual[:, 1:]                       # [B, m_max, d]
        active = embeds.text_mask[:, 1:]
        B, _, d = words.shape

        selection = select_subject(words, self.selector, active=active,
                                   temperature=self.temperature, training=training,
                                   hard=self.hard, noise=self.noise)
        s = selection.subject

        latents = []
        for i, k in enumerate(self.k_list):
            dropped = semantic_dropout(words, self.p_drop_list[i], training,
                                       elementwise=self.elementwise)
            attrs = length_transform(dropped, self.phis[i]) + self.attr_pos[i]
            z = torch.cat([self.latent_cls[i].expand(B, 1, d),
                           s.unsqueeze(1), attrs], dim=1)   # [B, k+2, d]
            latents.append(z)

        embeds.latents = latents
        embeds.visual = install_visual_subject(embeds.visual, s)
        return embeds, selection
