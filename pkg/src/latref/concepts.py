"""Visual concept injection for the latent attribute tokens.

Target-related patches are chosen by mean-thresholded similarity with the text
class token, pooled into a bank of concept tokens, and written into the
attribute tokens with an attention map normalized OVER the attribute axis so
that attribute tokens compete for concepts (slot-style binding).
"""

import torch
import torch.nn as nn

from .errors import ShapeMismatch


def target_patch_mask(patches, text_cls):
    """Boolean mask of patches whose similarity with the text class token
    reaches the per-sample mean. patches [..., n, d]; text_cls [..., d].

    The maximum always clears the mean, so at least one patch is selected.
    """
    scores = (patches * text_cls.unsqueeze(-2)).sum(-1)     # [..., n]
    kappa = scores.mean(dim=-1, keepdim=True)
    return scores >= kappa


def select_target_patches(patches, text_cls):
    """Unbatched convenience: returns (selected rows [N_tr, d], index list)."""
    mask = target_patch_mask(patches, text_cls)
    idx = torch.nonzero(mask, as_tuple=False).squeeze(-1)
    return patches[idx], idx.tolist()


def retrieve_visual_concepts(concepts, patches, patch_mask=None):
    """Pool target patches into each concept slot by a row-softmax attention.

    concepts [N_c, d]; patches [..., n, d]; patch_mask [..., n] bool restricts
    the softmax to selected patches (None keeps all). Returns
    (pooled [..., N_c, d], weights [..., N_c, n]) where every weight row is a
    convex combination over the selected patches.
    """
    scores = concepts @ patches.transpose(-2, -1)           # [..., N_c, n]
    if patch_mask is not None:
        if not bool(patch_mask.any(dim=-1).all()):
            raise ShapeMismatch("every sample needs at least one selected patch")
        scores = scores.masked_fill(~patch_mask.unsqueeze(-2), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ patches, weights


def inject_concepts(attributes, visual_concepts):
    """Write pooled concepts into the concatenated attribute tokens.

    attributes [..., N_a, d]; visual_concepts [..., N_c, d]. The attention map
    is normalized over the N_a attribute axis (each concept's weight column
    sums to one), so attributes compete for distinct concepts. Returns
    (increment [..., N_a, d], weights [..., N_a, N_c]).
    """
    if attributes.shape[-1] != visual_concepts.shape[-1]:
        raise ShapeMismatch("attribute and concept channel dimensions differ")
    scores = attributes @ visual_concepts.transpose(-2, -1)  # [..., N_a, N_c]
    weights = torch.softmax(scores, dim=-2)                  # column softmax
    return weights @ visual_concepts, weights


class ConceptBank(nn.Module):
    """Learned concept tokens with (semi-)orthogonal initialization.

    With n_concepts <= d the rows are exactly orthonormal; in the
    over-complete case the columns are orthonormalized instead, leaving a
    bounded residual in the row Gram matrix.
    """

    def __init__(self, n_concepts, d):
        super().__init__()
        self.tokens = nn.Parameter(torch.empty(n_concepts, d))
        nn.init.orthogonal_(self.tokens)


class ConceptInjector(nn.Module):
    """Per-layer application of the selection/retrieval/injection pipeline."""

    def __init__(self, config):
        super().__init__()
        self.replace = config.replace_attributes
        n_banks = config.layers if config.per_layer_concepts else 1
        self.banks = nn.ModuleList(ConceptBank(config.n_concepts, config.d)
                                   for _ in range(n_banks))

    def bank_for(self, layer_idx):
        return self.banks[layer_idx % len(self.banks)].tokens

    def forward(self, embeds, layer_idx, collect=False):
        """Update the attribute rows of every latent expression in place.
        Class and subject rows are untouched."""
        if not embeds.latents:
            return embeds, None
        patches = embeds.visual[:, 1:]                      # [B, n, d]
        text_cls = embeds.textual[:, 0]                     # [B, d]
        mask = target_patch_mask(patches, text_cls)
        pooled, w_patches = retrieve_visual_concepts(self.bank_for(layer_idx),
                                                     patches, patch_mask=mask)

        attrs = torch.cat([z[:, 2:] for z in embeds.latents], dim=1)  # [B, N_a, d]
        increment, w_attrs = inject_concepts(attrs, pooled)
        updated = increment if self.replace else attrs + increment

        ks = [z.shape[1] - 2 for z in embeds.latents]
        parts = torch.split(updated, ks, dim=1)
        embeds.latents = [torch.cat([z[:, :2], a], dim=1)
                          for z, a in zip(embeds.latents, parts)]
        diag = None
        if collect:
            diag = {"patch_mask": mask, "patch_weights": w_patches,
                    "attr_weights": w_attrs}
        return embeds, diag
