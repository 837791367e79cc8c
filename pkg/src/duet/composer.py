"""Pseudo-word inversion and query composition.

The converter maps visual features into the text transformer's input token
space; the learned prompt rows are prepended to every composed query. All
composed sequence variants used in training and inference are assembled
here: plain (prompt + pseudo), difference-augmented, neutral-text,
fixed-prompt, and free-text queries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .adapter import EncoderAdapter, TokenSequence
from .errors import ConfigError, InputError
from .wordlists import load_phrases

PROMPT_ROWS = 3
PROMPT_INIT_TEXT = "a photo of"
DEFAULT_CONNECTOR = "with"


@dataclass
class PseudoWordToken:
    """Converter output acting as a word embedding; (n_tokens, width)."""

    tokens: torch.Tensor
    provenance: str  # "sketch" | "difference"

    def __post_init__(self):
        if self.provenance not in ("sketch", "difference"):
            raise InputError(f"bad provenance {self.provenance!r}")
        if self.tokens.dim() != 2:
            raise InputError("pseudo-word tokens must be (n, width)")
        if not torch.isfinite(self.tokens).all():
            raise InputError("pseudo-word token contains NaN/Inf")


class VisualWordConverter(nn.Module):
    """3-layer MLP with ReLU mapping a visual feature to pseudo-word tokens.

    Hidden width defaults to 2x the input; the final layer can emit several
    tokens at once (reshaped rows) for the multi-token ablation.
    """

    def __init__(self, dim: int, token_width: int, hidden: int | None = None,
                 n_tokens: int = 1, init_seed: int = 0, init_std: float = 0.1):
        super().__init__()
        if n_tokens < 1:
            raise ConfigError("n_tokens must be >= 1")
        hidden = hidden or 2 * dim
        self.dim = dim
        self.token_width = token_width
        self.n_tokens = n_tokens
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.layers = nn.Sequential(
                nn.Linear(dim, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
                nn.Linear(hidden, n_tokens * token_width),
            )
            # small-variance weights, zero biases; near-zero inits stall the
            # first ~100 steps while token magnitudes grow
            for layer in self.layers:
                if isinstance(layer, nn.Linear):
                    nn.init.normal_(layer.weight, std=init_std)
                    nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(..., dim) -> (..., n_tokens, token_width)."""
        if x.shape[-1] != self.dim:
            raise ConfigError(f"converter expects width {self.dim}, got {x.shape[-1]}")
        out = self.layers(x)
        return out.view(*x.shape[:-1], self.n_tokens, self.token_width)


def init_prompt_rows(adapter: EncoderAdapter, text: str = PROMPT_INIT_TEXT,
                     rows: int = PROMPT_ROWS) -> torch.Tensor:
    """Warm-start prompt rows from a real prompt: one row per word, each the
    mean of that word's token embeddings."""
    words = text.split()
    while len(words) < rows:
        words.append(words[-1])
    out = []
    for word in words[:rows]:
        emb = adapter.embed_words(word).embeddings
        out.append(emb.mean(dim=0))
    return torch.stack(out).detach().clone()


class QueryComposer:
    """Owns the converter and learned prompt; builds every composed query."""

    def __init__(self, adapter: EncoderAdapter, n_tokens: int = 1,
                 hidden: int | None = None, init_seed: int = 0):
        self.adapter = adapter
        d = adapter.config.embed_dim
        self.converter = VisualWordConverter(
            d, adapter.config.text_width, hidden=hidden,
            n_tokens=n_tokens, init_seed=init_seed,
        )
        self.prompt = nn.Parameter(init_prompt_rows(adapter))
        self.connectors = load_phrases("connecting_word")

    # ---- inversion ----

    def invert(self, feature: torch.Tensor) -> PseudoWordToken:
        if feature.dim() != 1 or feature.shape[0] != self.converter.dim:
            raise ConfigError(
                f"expected ({self.converter.dim},) feature, got {tuple(feature.shape)}"
            )
        return PseudoWordToken(tokens=self.converter(feature), provenance="sketch")

    def difference_token(self, photo_global: torch.Tensor,
                         sketch_global: torch.Tensor) -> PseudoWordToken:
        if photo_global.shape != sketch_global.shape:
            raise ConfigError("photo/sketch feature width mismatch")
        delta = (photo_global - sketch_global).abs()
        return PseudoWordToken(tokens=self.converter(delta), provenance="difference")

    # ---- composition ----

    def compose(self, prompt: torch.Tensor | TokenSequence,
                pseudo: PseudoWordToken | torch.Tensor | None,
                tail: TokenSequence | None = None) -> TokenSequence:
        """prompt ‖ pseudo ‖ tail, truncating only the tail when over budget."""
        if pseudo is None:
            raise InputError("composed queries require a pseudo-word token")
        prompt_rows = prompt.embeddings if isinstance(prompt, TokenSequence) else prompt
        pseudo_rows = pseudo.tokens if isinstance(pseudo, PseudoWordToken) else pseudo
        if pseudo_rows.dim() == 1:
            pseudo_rows = pseudo_rows[None]
        budget = self.adapter.config.context_length - 2  # BOS/EOS framing
        head = prompt_rows.shape[0] + pseudo_rows.shape[0]
        if head > budget:
            raise ConfigError(f"prompt+pseudo ({head} tokens) exceed context budget {budget}")
        parts = [prompt_rows, pseudo_rows]
        if tail is not None:
            room = budget - head
            tail_rows = tail.embeddings
            if tail_rows.shape[0] > room:
                warnings.warn(
                    f"text tail truncated from {tail_rows.shape[0]} to {room} tokens "
                    "to fit the context budget",
                    stacklevel=2,
                )
                tail_rows = tail_rows[:room]
            parts.append(tail_rows)
        return TokenSequence(embeddings=torch.cat(parts, dim=0))

    # ---- inference ----

    def resolve_connector(self, text: str | None, connector: str | None) -> str:
        if text is None:
            return ""
        if connector is None:
            return DEFAULT_CONNECTOR
        connector = connector.strip()
        if connector and connector not in self.connectors:
            warnings.warn(
                f"connector {connector!r} is not in the shipped connecting-word list; "
                "passing through as free-form text",
                stacklevel=2,
            )
        return connector

    def build_inference_query(self, sketch: Image.Image | torch.Tensor,
                              text: str | None = None,
                              connector: str | None = None) -> torch.Tensor:
        """Full composed-query path; returns the unit-normalized d-vector."""
        if isinstance(sketch, Image.Image):
            sketch = self.adapter.preprocess(sketch)
        feat = self.adapter.encode_image(sketch, source_kind="sketch")
        with torch.no_grad():
            pseudo = self.invert(feat.global_)
            tail = None
            if text is not None and text.strip():
                conn = self.resolve_connector(text, connector)
                phrase = f"{conn} {text.strip()}" if conn else text.strip()
                tail = self.adapter.embed_words(phrase)
            seq = self.compose(self.prompt, pseudo, tail)
            query = self.adapter.encode_sequence(seq)
            return F.normalize(query, dim=0)

    # ---- checkpoint plumbing ----

    def state(self) -> dict:
        return {
            "converter": self.converter.state_dict(),
            "prompt": self.prompt.detach().clone(),
            "n_tokens": self.converter.n_tokens,
        }

    def load_state(self, state: dict):
        self.converter.load_state_dict(state["converter"])
        with torch.no_grad():
            self.prompt.copy_(state["prompt"])

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        out = {f"converter.{n}": p for n, p in self.converter.named_parameters()}
        out["prompt"] = self.prompt
        return out
