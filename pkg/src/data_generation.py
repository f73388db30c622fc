"""
Synthetic corpus generation and corpus file IO
Intents are defined by keyword sets; natural audio is the synthesized rendering
of a transcript plus Gaussian frame noise
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonlines
import numpy as np

from config import CorpusSpec
from src.encoders import SPLITS, Corpus, Utterance
from src.exceptions import DependencyError, FormatError, SpecError
from src.numerics import derive_rng
from src.utils import load_json, save_json
from src.zeroshot import BotDefinition, synthesize_pseudo_audio

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "zintent-corpus-v1"
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


def validate_spec(spec: CorpusSpec):
    """Raise SpecError unless the spec can produce disjoint keyword sets"""
    n_intents = spec.n_intents_seen + spec.n_intents_unseen
    lo, hi = spec.sentence_length_range
    checks = [
        (spec.n_intents_seen >= 0 and spec.n_intents_unseen >= 0, "intent counts must be non-negative"),
        (n_intents >= 1, "corpus needs at least one intent"),
        (spec.keywords_per_intent >= 1, "keywords_per_intent must be >= 1"),
        (spec.sentences_per_intent >= 1, "sentences_per_intent must be >= 1"),
        (spec.bot_pool_per_intent >= 1, "bot_pool_per_intent must be >= 1"),
        (spec.frames_per_token >= 1, "frames_per_token must be >= 1"),
        (spec.frame_dim >= 1, "frame_dim must be >= 1"),
        (spec.acoustic_rank >= 1, "acoustic_rank must be >= 1"),
        (1 <= lo <= hi, f"bad sentence_length_range {spec.sentence_length_range}"),
        (spec.audio_noise_sigma >= 0.0, "audio_noise_sigma must be non-negative"),
        (spec.mix_seen_intents >= 0, "mix_seen_intents must be non-negative"),
    ]
    for ok, message in checks:
        if not ok:
            raise SpecError(message)
    needed = n_intents * spec.keywords_per_intent + 1
    if spec.vocab_size < needed:
        raise SpecError(
            f"vocab_size {spec.vocab_size} too small for {n_intents} disjoint keyword sets "
            f"of {spec.keywords_per_intent} plus filler tokens (need >= {needed})"
        )


def split_counts(n: int) -> Tuple[int, int, int]:
    """70/10/20 train/dev/test counts for one intent"""
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_dev = min(int(round(n * SPLIT_FRACTIONS[1])), n - n_train)
    return n_train, n_dev, n - n_train - n_dev


def render_natural(tokens: Sequence[int], spec: CorpusSpec, noise: Optional[np.ndarray],
                   sigma: float) -> np.ndarray:
    """Synthesized frames plus sigma-scaled standard normal noise"""
    frames = synthesize_pseudo_audio(tokens, spec.synth_seed, spec.frames_per_token, spec.frame_dim,
                                     spec.acoustic_rank)
    if sigma > 0 and noise is not None:
        frames = frames + sigma * noise
    return frames


@dataclass
class GeneratedCorpus:
    """Seen corpus, unseen corpus and the text-only bot sentence pool"""

    spec: CorpusSpec
    seen: Corpus
    unseen: Corpus
    bot_pool: BotDefinition
    keywords: Dict[int, List[int]]

    @property
    def seen_intents(self) -> List[int]:
        return list(self.seen.intents)

    @property
    def unseen_intents(self) -> List[int]:
        return list(self.unseen.intents)

    @property
    def mix_intents(self) -> List[int]:
        return self.seen_intents[:self.spec.mix_seen_intents] + self.unseen_intents

    def unseen_bot(self, k: int) -> BotDefinition:
        return self.bot_pool.subset(self.unseen_intents).head(k)

    def mix_bot(self, k: int) -> BotDefinition:
        return self.bot_pool.subset(self.mix_intents).head(k)

    def unseen_test(self) -> List[Utterance]:
        return self.unseen.split("test")

    def mix_test(self) -> List[Utterance]:
        mixed_seen = set(self.seen_intents[:self.spec.mix_seen_intents])
        return [u for u in self.seen.split("test") if u.intent in mixed_seen] + self.unseen_test()


class CorpusGenerator:
    """Builds a GeneratedCorpus from a CorpusSpec; every draw comes from named seed streams"""

    def __init__(self, spec: CorpusSpec):
        validate_spec(spec)
        self.spec = spec
        self.n_intents = spec.n_intents_seen + spec.n_intents_unseen

    def _vocabulary(self) -> Tuple[Dict[int, List[int]], np.ndarray]:
        k = self.spec.keywords_per_intent
        order = derive_rng(self.spec.seed, "keywords").permutation(self.spec.vocab_size)
        keywords = {i: sorted(int(t) for t in order[i * k:(i + 1) * k]) for i in range(self.n_intents)}
        fillers = np.sort(order[self.n_intents * k:])
        return keywords, fillers

    def _sentence(self, rng: np.random.Generator, keywords: List[int], fillers: np.ndarray) -> Tuple[int, ...]:
        lo, hi = self.spec.sentence_length_range
        length = int(rng.integers(lo, hi + 1))
        k = len(keywords)
        n_keywords = min(length, int(rng.integers((k + 1) // 2, k + 1)))
        tokens = list(rng.choice(keywords, size=n_keywords, replace=False))
        tokens += list(rng.choice(fillers, size=length - n_keywords, replace=True))
        rng.shuffle(tokens)
        return tuple(int(t) for t in tokens)

    def generate(self) -> GeneratedCorpus:
        spec = self.spec
        keywords, fillers = self._vocabulary()
        sentence_rng = derive_rng(spec.seed, "sentences")
        noise_rng = derive_rng(spec.seed, "noise")

        utterances: List[Utterance] = []
        for intent in range(self.n_intents):
            n_train, n_dev, _ = split_counts(spec.sentences_per_intent)
            for j in range(spec.sentences_per_intent):
                tokens = self._sentence(sentence_rng, keywords[intent], fillers)
                rows = len(tokens) * spec.frames_per_token
                noise = noise_rng.normal(0.0, 1.0, size=(rows, spec.frame_dim))
                split = SPLITS[0] if j < n_train else SPLITS[1] if j < n_train + n_dev else SPLITS[2]
                utterances.append(Utterance(
                    id=f"u{intent:03d}_{j:04d}",
                    frames=render_natural(tokens, spec, noise, spec.audio_noise_sigma),
                    tokens=tokens,
                    intent=intent,
                    split=split,
                ))

        bot_rng = derive_rng(spec.seed, "bot")
        sentences, labels = [], []
        for intent in range(self.n_intents):
            for j in range(spec.bot_pool_per_intent):
                sentences.append((f"b{intent:03d}_{j:04d}", self._sentence(bot_rng, keywords[intent], fillers)))
                labels.append(intent)

        seen_ids = list(range(spec.n_intents_seen))
        unseen_ids = list(range(spec.n_intents_seen, self.n_intents))
        generated = GeneratedCorpus(
            spec=spec,
            seen=Corpus([u for u in utterances if u.intent in set(seen_ids)], seen_ids, spec.vocab_size),
            unseen=Corpus([u for u in utterances if u.intent in set(unseen_ids)], unseen_ids, spec.vocab_size),
            bot_pool=BotDefinition(sentences, labels, set(range(self.n_intents))),
            keywords=keywords,
        )
        logger.info("generated corpus: %d seen intents, %d unseen intents, %d utterances, %d bot sentences",
                    len(seen_ids), len(unseen_ids), len(utterances), len(sentences))
        return generated


def generate_corpus(spec: CorpusSpec) -> GeneratedCorpus:
    return CorpusGenerator(spec).generate()


def save_bot(bot: BotDefinition, filepath: str):
    records = [{"sentence_id": sid, "intent": label, "tokens": list(tokens)}
               for (sid, tokens), label in zip(bot.sentences, bot.labels)]
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    with jsonlines.open(filepath, mode='w') as writer:
        writer.write_all(records)


def load_bot(filepath: str) -> BotDefinition:
    if not Path(filepath).exists():
        raise DependencyError(f"bot definition not found: {filepath}")
    try:
        with jsonlines.open(filepath) as reader:
            records = list(reader)
        return BotDefinition([(r["sentence_id"], r["tokens"]) for r in records],
                             [r["intent"] for r in records])
    except (KeyError, TypeError, jsonlines.InvalidLineError) as e:
        raise FormatError(f"malformed bot definition {filepath}: {e}")


def save_corpus(generated: GeneratedCorpus, data_dir: str, bot_sentences_per_intent: int = 30):
    """
    Write the corpus to data_dir

    utterances.jsonl holds one utterance per line with a row range into
    frames.npy; bot_pool.jsonl, bot_unseen.jsonl and bot_mix.jsonl hold the
    bot sentences; corpus.json holds the spec and intent partition.
    """
    out = Path(data_dir)
    out.mkdir(parents=True, exist_ok=True)

    records, blocks, offset = [], [], 0
    for u in generated.seen.utterances + generated.unseen.utterances:
        records.append({
            "id": u.id,
            "split": u.split,
            "intent": u.intent,
            "tokens": list(u.tokens),
            "frames": [offset, offset + u.frames.shape[0]],
        })
        blocks.append(u.frames)
        offset += u.frames.shape[0]
    with jsonlines.open(out / "utterances.jsonl", mode='w') as writer:
        writer.write_all(records)
    np.save(out / "frames.npy", np.vstack(blocks).astype("<f8"))

    k = min(bot_sentences_per_intent, generated.spec.bot_pool_per_intent)
    save_bot(generated.bot_pool, str(out / "bot_pool.jsonl"))
    if generated.unseen_intents:
        save_bot(generated.unseen_bot(k), str(out / "bot_unseen.jsonl"))
    if generated.mix_intents:
        save_bot(generated.mix_bot(k), str(out / "bot_mix.jsonl"))

    save_json({
        "format": CORPUS_FORMAT,
        "spec": dataclasses.asdict(generated.spec),
        "seen_intents": generated.seen_intents,
        "unseen_intents": generated.unseen_intents,
        "keywords": {str(i): kw for i, kw in generated.keywords.items()},
    }, str(out / "corpus.json"))
    logger.info("corpus written to %s (%d utterances)", out, len(records))


def load_corpus(data_dir: str) -> GeneratedCorpus:
    root = Path(data_dir)
    if not (root / "corpus.json").exists():
        raise DependencyError(f"no corpus in {data_dir}; run `generate` first")
    meta = load_json(str(root / "corpus.json"))
    if meta.get("format") != CORPUS_FORMAT:
        raise FormatError(f"unsupported corpus format {meta.get('format')!r}, expected {CORPUS_FORMAT}")
    try:
        spec_values = dict(meta["spec"])
        spec_values["sentence_length_range"] = tuple(spec_values["sentence_length_range"])
        spec = CorpusSpec(**spec_values)
        frames = np.load(root / "frames.npy")
        with jsonlines.open(root / "utterances.jsonl") as reader:
            utterances = [
                Utterance(id=r["id"], frames=frames[r["frames"][0]:r["frames"][1]],
                          tokens=r["tokens"], intent=r["intent"], split=r["split"])
                for r in reader
            ]
        seen_ids, unseen_ids = meta["seen_intents"], meta["unseen_intents"]
        keywords = {int(i): kw for i, kw in meta["keywords"].items()}
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise FormatError(f"malformed corpus in {data_dir}: {e}")

    return GeneratedCorpus(
        spec=spec,
        seen=Corpus([u for u in utterances if u.intent in set(seen_ids)], seen_ids, spec.vocab_size),
        unseen=Corpus([u for u in utterances if u.intent in set(unseen_ids)], unseen_ids, spec.vocab_size),
        bot_pool=load_bot(str(root / "bot_pool.jsonl")),
        keywords=keywords,
    )
