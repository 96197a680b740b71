"""Text <-> token ids: character inventory with reserved specials, optional BPE merges."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

BLANK, PAD, SOS, EOS, UNK = 0, 1, 2, 3, 4
SPECIALS = ("<blank>", "<pad>", "<sos>", "<eos>", "<unk>")
N_SPECIALS = len(SPECIALS)
SPACE = " "


class Vocab:
    """Ordered symbol inventory. Ids 0-4 are blank, pad, sos, eos, unk."""

    def __init__(self, symbols: Sequence[str], merges: Sequence[tuple[str, str]] | None = None):
        symbols = list(symbols)
        if tuple(symbols[:N_SPECIALS]) != SPECIALS:
            symbols = list(SPECIALS) + [s for s in symbols if s not in SPECIALS]
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}
        self.merges = list(merges) if merges is not None else self._infer_merges()
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols and self.merges == other.merges

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        chars = sorted({c for t in texts for c in t})
        return cls(list(SPECIALS) + chars)

    def _infer_merges(self) -> list[tuple[str, str]]:
        # multi-char symbols appear in merge order; pick the split whose newest part is latest
        merges = []
        for s in self.symbols[N_SPECIALS:]:
            if len(s) < 2:
                continue
            best = None
            for k in range(1, len(s)):
                left, right = s[:k], s[k:]
                if left in self.index and right in self.index:
                    key = max(self.index[left], self.index[right])
                    if key < self.index[s] and (best is None or key > best[0]):
                        best = (key, (left, right))
            if best is None:
                raise ValueError(f"symbol {s!r} cannot be built from earlier symbols")
            merges.append(best[1])
        return merges

    # -- encode / decode -------------------------------------------------
    def _bpe_word(self, word: str) -> list[str]:
        parts = list(word)
        while len(parts) > 1:
            ranked = [(self._ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(parts, parts[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            r, _ = min(ranked)
            pair = self.merges[r]
            out, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == pair:
                    out.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            parts = out
        return parts

    def encode(self, text: str) -> list[int]:
        if not self.merges:
            return [self.index.get(c, UNK) for c in text]
        ids: list[int] = []
        for k, word in enumerate(text.split(SPACE)):
            if k:
                ids.append(self.index.get(SPACE, UNK))
            ids.extend(self.index.get(p, UNK) for p in self._bpe_word(word))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids if i >= N_SPECIALS and i < len(self.symbols))

    # -- file format: one symbol per line, line number == id -------------
    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def train_bpe(corpus: Iterable[str], target_size: int) -> Vocab:
    """Greedy pair-merge BPE within words.

    ``target_size`` counts learned symbols (characters plus merges), not the
    reserved specials.  Count ties go to the lexicographically smallest pair.
    """
    corpus = list(corpus)
    chars = sorted({c for t in corpus for c in t})
    if target_size < len(chars):
        raise ValueError(f"target_size {target_size} smaller than charset size {len(chars)}")
    words = Counter(w for t in corpus for w in t.split(SPACE) if w)
    seqs = {w: tuple(w) for w in words}
    symbols = list(chars)
    merges: list[tuple[str, str]] = []
    while len(symbols) < target_size:
        pairs: Counter = Counter()
        for w, freq in words.items():
            s = seqs[w]
            for a, b in zip(s, s[1:]):
                pairs[(a, b)] += freq
        if not pairs:
            break
        best_count = max(pairs.values())
        pair = min(p for p, c in pairs.items() if c == best_count)
        merged = pair[0] + pair[1]
        merges.append(pair)
        if merged not in symbols:
            symbols.append(merged)
        for w in words:
            s = seqs[w]
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == pair:
                    out.append(merged)
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            seqs[w] = tuple(out)
    return Vocab(list(SPECIALS) + symbols, merges)
