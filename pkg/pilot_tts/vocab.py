"""
Token vocabulary of the autoregressive model.

Layout (fixed, recorded in checkpoint sidecars):
    [0, 255]        text bytes (UTF-8)
    [256, 6816]     audio tokens (6561 FSQ codes)
    then 5 specials, 16 language tags, 12 emotion tags, 6 paralinguistic markers
"""
import re
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from pilot_tts.exceptions import VocabError

TEXT_SIZE = 256
DEFAULT_CODEBOOK = 6561

SPECIALS = ('e_BT', 'e_ET', 'e_BA', 'e_EA', 'PAD')
DIALECTS = ('yue', 'wuu', 'nan', 'hak', 'hsn', 'gan', 'cjy', 'sichuan', 'dongbei',
            'henan', 'shaanxi', 'shandong', 'tianjin', 'yunnan')
LANG_TAGS = ('zh', 'en') + DIALECTS
EMO_TAGS = ('neutral', 'happy', 'sad', 'angry', 'fear', 'contempt', 'serious', 'surprise',
            'concern', 'blue', 'disgust', 'psychology')
PARALING_TAGS = ('LAUGH', 'BREATH', 'CRY', 'COUGH', 'LAUGH_SPAN_BEGIN', 'LAUGH_SPAN_END')

# Text-side spelling of the paralinguistic markers
MARKER_TEXT = {
    '[laugh]': 'LAUGH',
    '[breath]': 'BREATH',
    '[cry]': 'CRY',
    '[cough]': 'COUGH',
    '<laugh>': 'LAUGH_SPAN_BEGIN',
    '</laugh>': 'LAUGH_SPAN_END',
}
MARKER_PATTERN = re.compile('|'.join(re.escape(m) for m in MARKER_TEXT))

DEFAULT_LANG = 'zh'
DEFAULT_EMO = 'neutral'
TEXT_MODES = ('explicit', 'implicit')


def _block(start: int, names) -> Dict[str, int]:
    return {name: start + i for i, name in enumerate(names)}


@dataclass(frozen=True)
class Vocab:
    audio_size: int = DEFAULT_CODEBOOK
    specials: Dict[str, int] = field(default_factory=dict)
    langs: Dict[str, int] = field(default_factory=dict)
    emos: Dict[str, int] = field(default_factory=dict)
    paraling: Dict[str, int] = field(default_factory=dict)

    @property
    def audio_offset(self) -> int:
        return TEXT_SIZE

    @property
    def size(self) -> int:
        return TEXT_SIZE + self.audio_size + len(SPECIALS) + len(LANG_TAGS) + len(EMO_TAGS) + \
            len(PARALING_TAGS)

    @property
    def head_size(self) -> int:
        """Output classes: every audio token plus e_EA."""
        return self.audio_size + 1

    @property
    def eos_class(self) -> int:
        return self.audio_size

    def special(self, name: str) -> int:
        return self.specials[name]

    def lang_id(self, tag: str) -> int:
        if tag not in self.langs:
            raise VocabError(f'unknown language tag {tag!r}; valid tags: {", ".join(LANG_TAGS)}')
        return self.langs[tag]

    def emo_id(self, tag: str) -> int:
        if tag not in self.emos:
            raise VocabError(f'unknown emotion tag {tag!r}; valid tags: {", ".join(EMO_TAGS)}')
        return self.emos[tag]

    def marker_id(self, name: str) -> int:
        if name not in self.paraling:
            raise VocabError(f'unknown paralinguistic marker {name!r}')
        return self.paraling[name]

    def audio_id(self, token):
        """FSQ token id(s) -> vocabulary id(s)."""
        return token + TEXT_SIZE

    def class_to_id(self, cls: int) -> int:
        """Head class -> vocabulary id (the last class is e_EA)."""
        return self.specials['e_EA'] if cls == self.eos_class else TEXT_SIZE + int(cls)

    def id_to_class(self, vocab_id: int) -> int:
        if vocab_id == self.specials['e_EA']:
            return self.eos_class
        if not TEXT_SIZE <= vocab_id < TEXT_SIZE + self.audio_size:
            raise VocabError(f'id {vocab_id} is not an audio token or e_EA')
        return vocab_id - TEXT_SIZE

    def layout(self) -> Dict:
        """JSON-friendly description stored next to checkpoints."""
        return {
            'size': self.size,
            'text': [0, TEXT_SIZE - 1],
            'audio': [TEXT_SIZE, TEXT_SIZE + self.audio_size - 1],
            'specials': dict(self.specials),
            'langs': dict(self.langs),
            'emos': dict(self.emos),
            'paraling': dict(self.paraling),
        }


def build_vocab(audio_size: int = DEFAULT_CODEBOOK) -> Vocab:
    """Deterministic id assignment in the documented order."""
    start = TEXT_SIZE + audio_size
    specials = _block(start, SPECIALS)
    start += len(SPECIALS)
    langs = _block(start, LANG_TAGS)
    start += len(LANG_TAGS)
    emos = _block(start, EMO_TAGS)
    start += len(EMO_TAGS)
    paraling = _block(start, PARALING_TAGS)
    return Vocab(audio_size=audio_size, specials=specials, langs=langs, emos=emos,
                 paraling=paraling)


def split_markers(text: str) -> List[Tuple[str, str]]:
    """
    Split text into ('text', chunk) and ('marker', NAME) pieces.

    >>> split_markers('hi [laugh] there')
    [('text', 'hi '), ('marker', 'LAUGH'), ('text', ' there')]
    """
    pieces: List[Tuple[str, str]] = []
    pos = 0
    for match in MARKER_PATTERN.finditer(text):
        if match.start() > pos:
            pieces.append(('text', text[pos:match.start()]))
        pieces.append(('marker', MARKER_TEXT[match.group(0)]))
        pos = match.end()
    if pos < len(text):
        pieces.append(('text', text[pos:]))
    return pieces


def strip_markers(text: str) -> str:
    return ''.join(chunk for kind, chunk in split_markers(text) if kind == 'text')


def encode_text(text: str, vocab: Vocab, mode: str = 'explicit') -> List[int]:
    """
    Byte-level text ids with paralinguistic markers.

    Args:
        text: Transcript, possibly with [laugh] / <laugh>...</laugh> style markers
        vocab: Vocabulary
        mode: 'explicit' keeps markers as their own ids, 'implicit' drops them

    Returns:
        List of vocabulary ids
    """
    if mode not in TEXT_MODES:
        raise VocabError(f'unknown text mode {mode!r}; valid modes: {", ".join(TEXT_MODES)}')
    ids: List[int] = []
    for kind, chunk in split_markers(text):
        if kind == 'marker':
            if mode == 'explicit':
                ids.append(vocab.marker_id(chunk))
        else:
            ids.extend(chunk.encode('utf-8'))
    return ids
