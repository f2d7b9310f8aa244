"""The ASR student: Conformer encoder, shared CTC head, optional auxiliary decoder."""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .conformer import ConformerEncoder, CtcHead, EncoderConfig
from .ctc import ctc_greedy_decode
from .distill import AttentionDecoder, DecoderConfig


class AsrModel(nn.Module):
    def __init__(self, vocab_size: int, feat_dim: int, enc_cfg: EncoderConfig,
                 dec_cfg: DecoderConfig | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.feat_dim = feat_dim
        self.encoder = ConformerEncoder(rng, enc_cfg, feat_dim)
        self.ctc_head = CtcHead(rng, enc_cfg.dim, vocab_size + 1)
        self.decoder = None
        if dec_cfg is not None:
            self.decoder = AttentionDecoder(np.random.default_rng([seed, 1]), vocab_size,
                                            enc_cfg.dim, dec_cfg)

    def inference_parameters(self) -> dict[str, np.ndarray]:
        """Parameters CTC decoding depends on (everything but the decoder)."""
        return {k: v for k, v in self.state_dict().items() if not k.startswith("decoder.")}

    def frame_logprobs(self, feats: np.ndarray) -> np.ndarray:
        """Log-softmax CTC outputs (T x |V|+1) for one utterance, eval mode."""
        with T.no_grad():
            h = self.encoder(feats).final
            return T.log_softmax(self.ctc_head(h)).data

    def batch_logprobs(self, feats: list[np.ndarray]) -> list[np.ndarray]:
        x, lengths = pad_features(feats)
        with T.no_grad():
            enc = self.encoder(x, lengths)
            lp = T.log_softmax(self.ctc_head(enc.final)).data
        return [lp[i, :n] for i, n in enumerate(enc.lengths)]

    def layer_gradient_norms(self) -> dict[str, float]:
        """Gradient L2 norm per component: ``input``, ``layer1`` .. ``layerN``, ``ctc_head``, ``decoder``."""
        groups = {"input": self.encoder.input_proj}
        groups.update({f"layer{i}": b for i, b in enumerate(self.encoder.blocks, start=1)})
        groups["ctc_head"] = self.ctc_head
        if self.decoder is not None:
            groups["decoder"] = self.decoder
        return {k: T.grad_norm(m.parameters()) for k, m in groups.items()}

    def greedy(self, feats: np.ndarray) -> list[int]:
        return ctc_greedy_decode(self.frame_logprobs(feats))


def pad_features(feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats])
    x = np.zeros((len(feats), lengths.max(), feats[0].shape[1]))
    for i, f in enumerate(feats):
        x[i, :f.shape[0]] = f
    return x, lengths
