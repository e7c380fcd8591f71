"""
Prompt templates.

All prompts live as editable Jinja2 files under app/templates/. Values are
substituted once and never re-rendered, so chunk text containing template
syntax reaches the model verbatim.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, StrictUndefined, TemplateNotFound

from app.services import HarnessError

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / 'templates'


class TemplateError(HarnessError):
    """A prompt template is missing or failed to render."""


class PromptLibrary:
    """Loads and renders the prompt templates of one run."""

    def __init__(self, template_dir: Optional[str] = None):
        self.template_dir = Path(template_dir) if template_dir else TEMPLATE_DIR
        self.env = Environment(
            loader=FileSystemLoader(str(self.template_dir)),
            undefined=StrictUndefined,
            autoescape=False,
            keep_trailing_newline=False,
        )

    def render(self, name: str, **values) -> str:
        try:
            template = self.env.get_template(name)
        except TemplateNotFound as e:
            raise TemplateError(f"template '{name}' not found in {self.template_dir}") from e
        return template.render(**values)

    def source(self, name: str) -> str:
        path = self.template_dir / name
        if not path.exists():
            raise TemplateError(f"template '{name}' not found in {self.template_dir}")
        return path.read_text(encoding='utf-8')

    def digests(self) -> Dict[str, str]:
        """sha256 of every template file, keyed by its relative name."""
        digests = {}
        for path in sorted(self.template_dir.rglob('*.j2')):
            name = path.relative_to(self.template_dir).as_posix()
            digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        return digests


def render_chunk_context(texts: Sequence[str]) -> str:
    """Numbered [Chunk i] sections, 1-based, in bundle order."""
    return "\n\n".join(f"[Chunk {i}]\n{text}" for i, text in enumerate(texts, start=1))


def render_passages(texts: Sequence[str]) -> str:
    """Numbered [i] passages as the in-context generation prompt expects."""
    return "\n\n".join(f"[{i}] {text}" for i, text in enumerate(texts, start=1))


def render_answer_prompt(library: PromptLibrary, question: str, context_texts: List[str]) -> str:
    """
    The pinned answer prompt shared by benchmarking and SFT export.

    An empty context_texts list gives the closed-book variant.
    """
    context = render_chunk_context(context_texts) if context_texts else ''
    return library.render('answer.j2', question=question, context=context)


def format_cell(value, digits: int = 3) -> str:
    if value is None:
        return 'n/a'
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def render_markdown_table(library: PromptLibrary, columns: Sequence[str], rows: Sequence[Sequence],
                          title: Optional[str] = None, digits: int = 3) -> str:
    """Markdown table; None cells render as n/a."""
    formatted = [[format_cell(value, digits) for value in row] for row in rows]
    return library.render('report_table.md.j2', title=title, columns=list(columns), rows=formatted)
