"""
Corpus Service

Turns raw seed documents into the provenance-bearing chunks every later stage
works on. Documents are decoded, split into paragraphs (with page numbers when
the format carries them), then packed greedily into token-budgeted chunks.
Paragraphs too long for one chunk fall back to a sentence-level sliding window.
"""

import hashlib
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import tiktoken

from app.background_jobs import run_in_pool
from app.database import read_records, write_records
from app.services import HarnessError

logger = logging.getLogger(__name__)

CHUNK_STORE_SCHEMA = 'chunk-store'
CHUNK_STORE_VERSION = 1


class IngestError(HarnessError):
    """Raised when a payload cannot become a Document."""


class TokenizerError(HarnessError):
    """Raised for unknown encoding names."""


class ChunkingError(HarnessError):
    """Raised when a document cannot be chunked."""


class DocumentFormat(Enum):
    """Input formats the ingester understands"""
    PDF_TEXT = "pdf-extracted-text"
    PLAIN_TEXT = "plain-text"
    MARKDOWN = "markdown"


@dataclass
class Document:
    """A seed document split into ordered paragraphs."""
    doc_id: str
    name: str
    path: str
    pages: List[Tuple[int, str]]
    paragraphs: List[str]
    paragraph_pages: List[int]
    format: DocumentFormat = DocumentFormat.PLAIN_TEXT

    @property
    def text(self) -> str:
        return "\n\n".join(self.paragraphs)


@dataclass
class Chunk:
    """A passage of the corpus with its provenance."""
    chunk_id: str
    doc_id: str
    name: str
    path: str
    page_numbers: List[int]
    section_header: Optional[str]
    text: str
    token_count: int
    # Leading characters repeated from the previous sliding window (0 for packed chunks)
    overlap_chars: int = 0

    def to_record(self) -> Dict:
        record = asdict(self)
        record['pages'] = record.pop('page_numbers')
        return record

    @classmethod
    def from_record(cls, record: Dict) -> 'Chunk':
        return cls(
            chunk_id=record['chunk_id'],
            doc_id=record['doc_id'],
            name=record.get('name', ''),
            path=record.get('path', ''),
            page_numbers=list(record.get('pages', [])),
            section_header=record.get('section_header'),
            text=record['text'],
            token_count=record['token_count'],
            overlap_chars=record.get('overlap_chars', 0),
        )


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

WHITESPACE_ENCODING = 'whitespace'
_WORD_PATTERN = re.compile(r'\S+')


@dataclass(frozen=True)
class TokenizerSpec:
    """Names the byte-pair-encoding vocabulary used for every token count."""
    encoding_name: str = 'cl100k_base'

    def count(self, text: str) -> int:
        return token_count(text, self)

    def split(self, text: str, max_tokens: int) -> List[str]:
        """Cut text into consecutive pieces of at most max_tokens tokens."""
        if self.encoding_name == WHITESPACE_ENCODING:
            words = _WORD_PATTERN.findall(text)
            return [" ".join(words[i:i + max_tokens]) for i in range(0, len(words), max_tokens)]
        encoding = _get_encoding(self.encoding_name)
        tokens = encoding.encode(text, disallowed_special=())
        pieces = []
        for start in range(0, len(tokens), max_tokens):
            piece = encoding.decode(tokens[start:start + max_tokens]).strip()
            # Re-encoding a decoded slice can merge differently; shrink until it fits
            step = max_tokens
            while piece and self.count(piece) > max_tokens and step > 1:
                step -= max(1, step // 10)
                piece = encoding.decode(tokens[start:start + step]).strip()
            if piece:
                pieces.append(piece)
        return pieces


@lru_cache(maxsize=8)
def _get_encoding(name: str) -> tiktoken.Encoding:
    try:
        return tiktoken.get_encoding(name)
    except (KeyError, ValueError) as e:
        raise TokenizerError(f"Unknown encoding '{name}': {e}") from e


def token_count(text: str, spec: TokenizerSpec) -> int:
    """
    Count tokens of text under the named encoding.

    Args:
        text: Any string, possibly empty
        spec: Tokenizer to use

    Returns:
        Non-negative token count, deterministic for fixed (text, spec)
    """
    if spec.encoding_name == WHITESPACE_ENCODING:
        return len(_WORD_PATTERN.findall(text))
    encoding = _get_encoding(spec.encoding_name)
    if not text:
        return 0
    return len(encoding.encode(text, disallowed_special=()))


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

def _clean_paragraph(value: str) -> str:
    """Collapse internal whitespace the way extracted text needs."""
    return re.sub(r'\s+', ' ', value).strip()


def _split_paragraphs(page_text: str) -> List[str]:
    blocks = re.split(r'\n\s*\n', page_text)
    return [p for p in (_clean_paragraph(b) for b in blocks) if p]


def make_doc_id(key: str) -> str:
    return hashlib.sha1(key.encode('utf-8')).hexdigest()[:12]


def ingest(raw_bytes: bytes, format: DocumentFormat, name: str = 'document',
           path: str = '', doc_id: Optional[str] = None) -> Document:
    """
    Decode a payload and split it into ordered paragraphs.

    Args:
        raw_bytes: Document payload
        format: Declared format of the payload
        name: Display name kept for provenance
        path: Source path kept for provenance
        doc_id: Identifier; defaults to a digest of path (or name) and content

    Returns:
        Document with paragraphs tagged by page number
    """
    try:
        text = raw_bytes.decode('utf-8-sig')
    except UnicodeDecodeError as e:
        raise IngestError(f"undecodable payload for '{name}': {e}") from e

    text = text.replace('\r\n', '\n').replace('\r', '\n')
    if not text.strip():
        raise IngestError("empty document")

    if format == DocumentFormat.PDF_TEXT:
        # pdftotext convention: one form feed per page break
        raw_pages = text.split('\f')
        if raw_pages and not raw_pages[-1].strip() and len(raw_pages) > 1:
            raw_pages = raw_pages[:-1]
        pages = [(number, page) for number, page in enumerate(raw_pages, start=1)]
    else:
        pages = [(1, text)]

    paragraphs: List[str] = []
    paragraph_pages: List[int] = []
    for page_number, page_text in pages:
        for paragraph in _split_paragraphs(page_text):
            paragraphs.append(paragraph)
            paragraph_pages.append(page_number)

    if not paragraphs:
        raise IngestError("empty document")

    if doc_id is None:
        doc_id = make_doc_id(f"{path or name}\n{text}")

    logger.info(f"Ingested '{name}': {len(pages)} pages, {len(paragraphs)} paragraphs")
    return Document(
        doc_id=doc_id,
        name=name,
        path=path,
        pages=pages,
        paragraphs=paragraphs,
        paragraph_pages=paragraph_pages,
        format=format,
    )


def detect_format(path: str, raw_bytes: bytes) -> DocumentFormat:
    lower = path.lower()
    if lower.endswith(('.md', '.markdown')):
        return DocumentFormat.MARKDOWN
    if lower.endswith('.pdf.txt') or b'\f' in raw_bytes:
        return DocumentFormat.PDF_TEXT
    return DocumentFormat.PLAIN_TEXT


def ingest_path(path: str, root: Optional[str] = None) -> Document:
    """Read a file from disk and ingest it; doc_id is derived from the relative path."""
    raw = Path(path).read_bytes()
    relative = str(Path(path).relative_to(root)) if root else Path(path).name
    return ingest(raw, detect_format(path, raw), name=Path(path).name, path=str(path),
                  doc_id=make_doc_id(relative))


def collect_corpus_files(paths: Iterable[str]) -> List[Tuple[str, str]]:
    """Expand files and directories into sorted (file, root) pairs."""
    found = []
    for entry in paths:
        entry_path = Path(entry)
        if entry_path.is_dir():
            for file_path in sorted(entry_path.rglob('*')):
                if file_path.is_file() and file_path.suffix.lower() in ('.txt', '.md', '.markdown'):
                    found.append((str(file_path), str(entry_path)))
        elif entry_path.is_file():
            found.append((str(entry_path), str(entry_path.parent)))
        else:
            logger.warning(f"Corpus path not found: {entry}")
    return found


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

@dataclass
class ChunkPolicy:
    """Token budgets for packing paragraphs into chunks."""
    target_tokens: int = 512
    min_tokens: int = 100
    max_tokens: int = 1024
    window_sentence_overlap: float = 0.25

    def __post_init__(self):
        if not (0 < self.min_tokens <= self.target_tokens <= self.max_tokens):
            raise ChunkingError(
                f"need 0 < min_tokens <= target_tokens <= max_tokens, got "
                f"{self.min_tokens}/{self.target_tokens}/{self.max_tokens}"
            )
        if not (0 <= self.window_sentence_overlap < 1):
            raise ChunkingError(f"window_sentence_overlap must be in [0, 1), got {self.window_sentence_overlap}")

    @classmethod
    def benchmark_profile(cls) -> 'ChunkPolicy':
        """Retrieval-conditioned benchmark runs: 320-token chunks, 64-token overlap."""
        return cls(target_tokens=320, min_tokens=64, max_tokens=320, window_sentence_overlap=64 / 320)


_SENTENCE_END = re.compile(r'[.!?]["\'\)\]]*\s+')


def sentence_starts(text: str) -> List[int]:
    """Start offsets of rule-based sentences; each sentence runs to the next start."""
    starts = [0]
    for match in _SENTENCE_END.finditer(text):
        if match.end() < len(text):
            starts.append(match.end())
    return starts


def split_sentences(text: str) -> List[str]:
    starts = sentence_starts(text) + [len(text)]
    return [text[starts[i]:starts[i + 1]].strip() for i in range(len(starts) - 1)
            if text[starts[i]:starts[i + 1]].strip()]


_HEADING = re.compile(r'^#{1,6}\s+(.+?)\s*#*$')


def detect_section_header(paragraph: str) -> Optional[str]:
    """Default header heuristic: markdown headings and short all-caps lines."""
    match = _HEADING.match(paragraph)
    if match:
        return match.group(1).strip()
    words = paragraph.split()
    if 0 < len(words) <= 12 and paragraph.isupper() and not paragraph.rstrip().endswith(('.', '!', '?')):
        return paragraph.strip()
    return None


@dataclass
class _Piece:
    text: str
    para_idx: int
    sent_idx: int
    page: int
    header: Optional[str]
    overlap_chars: int = 0
    word_offset: int = 0


def _window_paragraph(paragraph: str, para_idx: int, page: int, header: Optional[str],
                      policy: ChunkPolicy, spec: TokenizerSpec) -> List[_Piece]:
    """Sentence-level sliding window for a paragraph longer than max_tokens."""
    starts = sentence_starts(paragraph)
    bounds = starts + [len(paragraph)]

    # (start_char, end_char) per sentence; oversize sentences are hard-split
    units: List[Tuple[int, int, Optional[str]]] = []
    for i in range(len(starts)):
        begin, end = bounds[i], bounds[i + 1]
        sentence = paragraph[begin:end].strip()
        if not sentence:
            continue
        if spec.count(sentence) > policy.max_tokens:
            for part in spec.split(sentence, policy.target_tokens):
                units.append((begin, end, part))
        else:
            units.append((begin, end, None))

    def unit_text(lo: int, hi: int) -> str:
        # Hard-split parts cannot be sliced from the paragraph; join them instead
        if any(units[j][2] is not None for j in range(lo, hi)):
            return " ".join(units[j][2] if units[j][2] is not None
                            else paragraph[units[j][0]:units[j][1]].strip() for j in range(lo, hi))
        return paragraph[units[lo][0]:units[hi - 1][1]].strip()

    pieces = []
    start = 0
    overlap_chars = 0
    while start < len(units):
        end = start + 1
        while end < len(units) and spec.count(unit_text(start, end + 1)) <= policy.target_tokens:
            end += 1
        pieces.append(_Piece(unit_text(start, end), para_idx, start, page, header, overlap_chars))
        if end >= len(units):
            break
        window_size = end - start
        overlap = min(math.ceil(policy.window_sentence_overlap * window_size), window_size - 1)
        next_start = end - overlap
        if overlap > 0:
            shared = unit_text(next_start, end)
            overlap_chars = len(shared) + 1 if len(unit_text(next_start, end + 1)) > len(shared) else len(shared)
        else:
            overlap_chars = 0
        start = next_start
    return pieces


def _borrow_sentences(current_tokens: int, piece: _Piece, policy: ChunkPolicy,
                      spec: TokenizerSpec, joined: Callable[[str], int]) -> Tuple[Optional[_Piece], Optional[_Piece]]:
    """Move leading sentences of piece into an undersized open chunk, or leading words when no sentence fits."""
    sentences = split_sentences(piece.text)
    taken = 0
    for taken in range(1, max(1, len(sentences))):
        head = " ".join(sentences[:taken])
        total = joined(head)
        if total > policy.max_tokens:
            taken -= 1
            break
        if total >= policy.min_tokens:
            break
    if taken <= 0 or joined(" ".join(sentences[:taken])) < policy.min_tokens:
        return _borrow_words(piece, policy, joined)
    head = _Piece(" ".join(sentences[:taken]), piece.para_idx, piece.sent_idx, piece.page, piece.header)
    rest = _Piece(" ".join(sentences[taken:]), piece.para_idx, piece.sent_idx + taken, piece.page, piece.header,
                  word_offset=piece.word_offset)
    return head, rest


def _borrow_words(piece: _Piece, policy: ChunkPolicy,
                  joined: Callable[[str], int]) -> Tuple[Optional[_Piece], Optional[_Piece]]:
    """Shortest word prefix of piece that lifts the open chunk to min_tokens."""
    words = piece.text.split()
    if len(words) < 2 or joined(" ".join(words[:-1])) < policy.min_tokens:
        return None, piece
    lo, hi = 1, len(words) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if joined(" ".join(words[:mid])) >= policy.min_tokens:
            hi = mid
        else:
            lo = mid + 1
    if joined(" ".join(words[:lo])) > policy.max_tokens:
        return None, piece
    head = _Piece(" ".join(words[:lo]), piece.para_idx, piece.sent_idx, piece.page, piece.header)
    rest = _Piece(" ".join(words[lo:]), piece.para_idx, piece.sent_idx, piece.page, piece.header,
                  word_offset=piece.word_offset + lo)
    return head, rest


def _chunk_id(doc_id: str, para_idx: int, sent_idx: int, word_offset: int = 0) -> str:
    key = f"{doc_id}:{para_idx}:{sent_idx}" + (f":{word_offset}" if word_offset else '')
    return hashlib.sha1(key.encode('utf-8')).hexdigest()[:16]


def chunk_document(doc: Document, policy: ChunkPolicy, spec: TokenizerSpec,
                   header_detector: Callable[[str], Optional[str]] = detect_section_header) -> List[Chunk]:
    """
    Pack a document's paragraphs into chunks.

    Paragraphs are appended to the open chunk while its token count stays within
    target_tokens. An undersized open chunk may still absorb the next paragraph up
    to max_tokens, or borrow its leading sentences. Paragraphs over max_tokens are
    split by the sliding-window fallback.

    Args:
        doc: Document to chunk
        policy: Token budgets
        spec: Tokenizer used for every count
        header_detector: Maps a paragraph to a section title, or None

    Returns:
        Chunks in document order
    """
    if not any(p.strip() for p in doc.paragraphs):
        raise ChunkingError(f"document {doc.doc_id} has no non-empty paragraph")

    pieces: List[_Piece] = []
    header = None
    for idx, paragraph in enumerate(doc.paragraphs):
        if not paragraph.strip():
            continue
        detected = header_detector(paragraph) if header_detector else None
        if detected:
            header = detected
        page = doc.paragraph_pages[idx] if idx < len(doc.paragraph_pages) else 1
        if spec.count(paragraph) > policy.max_tokens:
            pieces.extend(_window_paragraph(paragraph, idx, page, header, policy, spec))
        else:
            pieces.append(_Piece(paragraph, idx, 0, page, header))

    chunks: List[Chunk] = []
    current: List[_Piece] = []

    def joined_count(extra: Optional[str] = None) -> int:
        texts = [p.text for p in current] + ([extra] if extra is not None else [])
        return spec.count("\n\n".join(texts))

    def emit():
        text = "\n\n".join(p.text for p in current)
        first = current[0]
        chunks.append(Chunk(
            chunk_id=_chunk_id(doc.doc_id, first.para_idx, first.sent_idx, first.word_offset),
            doc_id=doc.doc_id,
            name=doc.name,
            path=doc.path,
            page_numbers=sorted({p.page for p in current}),
            section_header=first.header,
            text=text,
            token_count=spec.count(text),
            overlap_chars=first.overlap_chars,
        ))

    i = 0
    while i < len(pieces):
        piece = pieces[i]
        if not current:
            current.append(piece)
            i += 1
            continue
        # A window that repeats earlier text always opens its own chunk
        if piece.overlap_chars == 0 and joined_count(piece.text) <= policy.target_tokens:
            current.append(piece)
            i += 1
            continue
        if piece.overlap_chars == 0 and joined_count() < policy.min_tokens:
            if joined_count(piece.text) <= policy.max_tokens:
                current.append(piece)
                i += 1
                continue
            head, rest = _borrow_sentences(joined_count(), piece, policy, spec, joined_count)
            if head is not None:
                current.append(head)
                pieces[i] = rest
            else:
                logger.warning(f"{doc.doc_id}: emitting a {joined_count()}-token chunk below min_tokens "
                               f"({policy.min_tokens}); the next piece cannot be split to fill it")
        emit()
        current = []
    if current:
        emit()

    logger.debug(f"Chunked {doc.doc_id} into {len(chunks)} chunks")
    return chunks


def reconstruct_words(chunks: List[Chunk]) -> List[str]:
    """Word sequence of a document's chunks with sliding-window overlaps removed."""
    words = []
    for chunk in chunks:
        words.extend(chunk.text[chunk.overlap_chars:].split())
    return words


def chunk_corpus(documents: List[Document], policy: ChunkPolicy, spec: TokenizerSpec,
                 max_workers: int = 1) -> List[Chunk]:
    """Chunk documents in parallel; output ordered by (doc_id, position)."""
    ordered = sorted(documents, key=lambda d: d.doc_id)
    outcome = run_in_pool(lambda d: chunk_document(d, policy, spec), ordered,
                          max_workers=max_workers, label='documents')
    chunks: List[Chunk] = []
    for index, (doc, result) in enumerate(zip(ordered, outcome.results)):
        if result is None:
            logger.warning(f"Skipped document {doc.name}: {outcome.errors.get(index)}")
            continue
        chunks.extend(result)

    seen = set()
    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise ChunkingError(f"duplicate chunk_id {chunk.chunk_id}")
        seen.add(chunk.chunk_id)
    return chunks


# ---------------------------------------------------------------------------
# Chunk store
# ---------------------------------------------------------------------------

class ChunkStore:
    """Chunks keyed by id, keeping corpus order."""

    def __init__(self, chunks: Iterable[Chunk]):
        self._chunks: Dict[str, Chunk] = {}
        for chunk in chunks:
            self._chunks[chunk.chunk_id] = chunk

    def __len__(self) -> int:
        return len(self._chunks)

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._chunks

    def __iter__(self):
        return iter(self._chunks.values())

    def get(self, chunk_id: str) -> Optional[Chunk]:
        return self._chunks.get(chunk_id)

    def require(self, chunk_id: str) -> Chunk:
        chunk = self._chunks.get(chunk_id)
        if chunk is None:
            raise KeyError(f"dangling chunk reference '{chunk_id}'")
        return chunk

    def by_doc(self) -> Dict[str, List[Chunk]]:
        grouped: Dict[str, List[Chunk]] = {}
        for chunk in self._chunks.values():
            grouped.setdefault(chunk.doc_id, []).append(chunk)
        return grouped

    @property
    def chunks(self) -> List[Chunk]:
        return list(self._chunks.values())


def write_chunk_store(chunks: List[Chunk], path: str) -> int:
    return write_records(path, CHUNK_STORE_SCHEMA, CHUNK_STORE_VERSION, (c.to_record() for c in chunks))


def read_chunk_store(path: str) -> ChunkStore:
    return ChunkStore(Chunk.from_record(r) for r in read_records(path, CHUNK_STORE_SCHEMA, CHUNK_STORE_VERSION))
