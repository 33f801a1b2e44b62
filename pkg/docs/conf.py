# Configuration file for the Sphinx documentation builder.
#
# Builds the fewshotlib API reference and guides with the Furo theme.
#
# For the full list of built-in configuration values, see:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import os
import sys
from datetime import datetime

# -- Path setup --------------------------------------------------------------

# Add the parent directory to sys.path so Sphinx can find the fewshotlib package
sys.path.insert(0, os.path.abspath('..'))

# -- Project information -----------------------------------------------------

project = 'fewshotlib'
copyright = f'{datetime.now().year}, Nick Spell'
author = 'Nick Spell'
release = '0.1.0'

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',           # Automatic documentation from docstrings
    'sphinx.ext.autosummary',       # Generate autodoc summaries
    'sphinx.ext.napoleon',          # Google-style sections in module docstrings
    'sphinx.ext.intersphinx',       # Link to numpy, librosa and rich
    'sphinx.ext.viewcode',          # Add links to highlighted source code
    'sphinx.ext.mathjax',           # Loss and update formulas in the guides

    'sphinx_copybutton',            # Add copy button to code blocks
    'sphinx_inline_tabs',           # CLI / Python tabs in the quickstart
    'myst_parser',                  # Markdown support
]

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

source_suffix = {
    '.rst': 'restructuredtext',
}

master_doc = 'index'
language = 'en'

# -- Options for HTML output -------------------------------------------------

html_theme = 'furo'

html_theme_options = {
    "sidebar_hide_name": False,
    "navigation_with_keys": True,
    "light_css_variables": {
        "color-brand-primary": "#0066CC",
        "color-brand-content": "#0066CC",
        "color-sidebar-background": "#f8f9fa",
        "color-sidebar-background-border": "#e1e4e8",
        "font-stack--monospace": "'JetBrains Mono', 'Fira Code', Consolas, Monaco, monospace",
    },
    "dark_css_variables": {
        "color-brand-primary": "#4A9EFF",
        "color-brand-content": "#4A9EFF",
        "color-sidebar-background": "#1a1d23",
        "color-background-primary": "#0d1117",
    },
    "top_of_page_button": "edit",
    "source_repository": "https://github.com/nickspell/fewshotlib",
    "source_branch": "master",
    "source_directory": "docs/",
}

html_static_path = ['_static']
html_show_sourcelink = True
html_show_sphinx = False
htmlhelp_basename = 'fewshotlibdoc'

# -- Options for autodoc -----------------------------------------------------

autodoc_default_options = {
    'members': True,
    'member-order': 'bysource',
    'undoc-members': True,
    'exclude-members': '__weakref__',
    'show-inheritance': True,
}

autodoc_class_signature = 'separated'
autodoc_typehints = 'description'
autodoc_typehints_description_target = 'documented'
autodoc_typehints_format = 'short'

# -- Options for autosummary ------------------------------------------------

autosummary_generate = True
autosummary_imported_members = False

# -- Options for napoleon ----------------------------------------------------

napoleon_google_docstring = True
napoleon_numpy_docstring = False
napoleon_use_admonition_for_examples = True
napoleon_use_ivar = True
napoleon_use_param = True
napoleon_use_rtype = True
napoleon_attr_annotations = True

# -- Options for intersphinx -------------------------------------------------

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'librosa': ('https://librosa.org/doc/latest/', None),
    'rich': ('https://rich.readthedocs.io/en/stable/', None),
}

# -- Options for extlinks ----------------------------------------------------

extlinks = {
    'issue': ('https://github.com/nickspell/fewshotlib/issues/%s', 'issue %s'),
    'pr': ('https://github.com/nickspell/fewshotlib/pull/%s', 'PR %s'),
}

# -- Advanced configuration --------------------------------------------------

pygments_style = 'sphinx'
pygments_dark_style = 'monokai'

numfig = True
numfig_format = {
    'table': 'Table %s',
    'code-block': 'Listing %s',
}
