import os

import jinja2

ENVIRONMENT = jinja2.Environment(
    loader=jinja2.FileSystemLoader(
        searchpath=[
            os.path.join(os.path.dirname(os.path.dirname(__file__)), "templates"),
        ]
    ),
    autoescape=False,
    keep_trailing_newline=True,
    trim_blocks=True,
    lstrip_blocks=True,
)


def fmt(value: float, digits: int = 6) -> str:
    return f"{value:.{digits}g}"


ENVIRONMENT.filters["fmt"] = fmt


def markdown_template(template_name: str, context: dict | None = None) -> str:
    if context is None:
        context = {}

    return ENVIRONMENT.get_template(template_name).render(**context)
