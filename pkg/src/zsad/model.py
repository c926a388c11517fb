"""The prompted detector: frozen encoders + hybrid prompts + projection + HSF."""

from __future__ import annotations

import copy
import dataclasses

import torch
from torch import nn

from .config import RunConfig
from .data import ABNORMAL_TEMPLATE, NORMAL_TEMPLATE
from .encoders import EncoderWeights, Vocabulary, encode_image, encode_text, image_global, tokenize
from .hsf import image_score, semantic_embedding
from .localization import AnomalyOutput, ProjectionLayer, aggregate_maps, patch_anomaly_scores, project_patches, scores_to_map
from .numerics import as_tensor
from .prompts import PromptSet, combine_hybrid, generate_dynamic



class ZeroShotDetector(nn.Module):
    """Anomaly maps and image scores for a grayscale image of a named category.

    Seeds: the frozen encoder uses ``cfg.seed``; prompts ``cfg.seed + 1``;
    projection ``cfg.seed + 2``.
    """

    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or Vocabulary()
        ec = cfg.encoder
        self.encoder = EncoderWeights(ec, len(self.vocab), seed=cfg.seed)
        self.prompts = PromptSet(cfg.prompt, ec.embed_dim_v, ec.embed_dim_t, seed=cfg.seed + 1)
        if cfg.shared_projection:
            self.projection = ProjectionLayer(ec.embed_dim_v, ec.shared_dim, seed=cfg.seed + 2)
        else:
            self.projection = nn.ModuleDict(
                {str(j): ProjectionLayer(ec.embed_dim_v, ec.shared_dim, seed=cfg.seed + 2 + i)
                 for i, j in enumerate(ec.hierarchy_layers)}
            )
        self.captions = (NORMAL_TEMPLATE, ABNORMAL_TEMPLATE)
        self._token_cache: dict[str, tuple] = {}

    @property
    def train_cfg(self):
        return self.cfg.train

    def _tokens(self, category: str):
        if category not in self._token_cache:
            normal, abnormal = (t.replace("[CLS]", category) for t in self.captions)
            n = self.cfg.encoder.context_len
            self._token_cache[category] = (tokenize(normal, self.vocab, n), tokenize(abnormal, self.vocab, n))
        return self._token_cache[category]

    def _proj(self, layer: int) -> nn.Module:
        if isinstance(self.projection, nn.ModuleDict):
            return self.projection[str(layer)]
        return self.projection

    def with_prompts(self, prompts: PromptSet) -> "ZeroShotDetector":
        """Shallow copy sharing everything except the prompt set."""
        other = copy.copy(self)
        other._modules = dict(self._modules)
        other._modules["prompts"] = prompts
        return other

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen_digest(self) -> str:
        return self.encoder.digest()

    def build_prompts(self, img: torch.Tensor):
        pc = self.cfg.prompt
        if not (pc.enable_static or pc.enable_dynamic):
            return None, None
        dyn_img = dyn_txt = None
        if pc.enable_dynamic:
            dyn_img, dyn_txt = generate_dynamic(img, self.encoder, self.prompts)
        p_img = combine_hybrid(self.prompts.static_image, dyn_img, pc)
        p_txt = combine_hybrid(self.prompts.static_text, dyn_txt, pc)
        return list(p_img.unbind(0)), list(p_txt.unbind(0))

    def text_embeddings(self, category: str, text_prompts) -> tuple[torch.Tensor, torch.Tensor]:
        normal, abnormal = self._tokens(category)
        t = encode_text(self.encoder, [normal, abnormal], text_prompts)
        return t[0], t[1]

    def forward(
        self,
        img,
        category: str,
        with_score: bool = True,
        hsf_seed: int | None = None,
        ranking_offset: torch.Tensor | None = None,
    ) -> AnomalyOutput:
        """Maps and (optionally) the HSF image score.

        ``ranking_offset`` is added to the per-patch scores HSF uses to rank
        clusters; it does not touch the returned maps.
        """
        img = as_tensor(img)
        ec = self.cfg.encoder
        img_prompts, txt_prompts = self.build_prompts(img)
        patches, cls = encode_image(self.encoder, img, img_prompts)
        f_n, f_a = self.text_embeddings(category, txt_prompts)
        tau = self.cfg.temperature

        layer_scores = {j: patch_anomaly_scores(project_patches(e, self._proj(j)), f_n, f_a, tau)
                        for j, e in patches.items()}
        layer_maps = {j: scores_to_map(s, ec.image_size, ec.image_size) for j, s in layer_scores.items()}
        agg_map = aggregate_maps([layer_maps[j] for j in ec.hierarchy_layers])
        agg_scores = torch.stack([layer_scores[j] for j in ec.hierarchy_layers]).mean(dim=0)

        score = None
        if with_score:
            rank_agg, rank_layers = agg_scores, layer_scores
            if ranking_offset is not None:
                rank_agg = agg_scores + ranking_offset
                rank_layers = {j: s + ranking_offset for j, s in layer_scores.items()}
            score = self.score_from(patches, cls, rank_agg, rank_layers, f_n, f_a, hsf_seed)
        return AnomalyOutput(layer_maps, agg_map, score, layer_scores, agg_scores)

    def score_from(self, patches, cls, agg_scores, layer_scores, f_n, f_a, hsf_seed=None):
        """Image score from HSF given patch embeddings and the patch scores used to rank clusters."""
        hc = self.cfg.hsf
        if hsf_seed is not None:
            hc = dataclasses.replace(hc, seed=hsf_seed)
        if hc.score_source == "aggregated":
            ranking = {j: agg_scores.detach() for j in patches}
        else:
            ranking = {j: s.detach() for j, s in layer_scores.items()}
        proj = {j: self._proj(j) for j in patches}
        f_i = image_global(self.encoder, cls)
        fused = semantic_embedding(patches, ranking, f_i, proj, hc)
        return image_score(fused, f_n, f_a, self.cfg.temperature)
