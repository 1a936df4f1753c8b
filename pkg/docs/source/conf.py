# -*- coding: utf-8 -*-
#
# Configuration file for the Sphinx documentation builder.
# http://www.sphinx-doc.org/en/master/config

import os
import sys

# point to project root
sys.path.insert(0, os.path.abspath('../..'))

from m2former import __version__  # noqa: E402

# -- Project information -----------------------------------------------------

project = 'm2former'
copyright = '2026, m2former developers'
author = 'm2former developers'

version = '.'.join(__version__.split('.')[:2])
release = __version__

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx_autodoc_typehints',
    'm2r',
]

templates_path = ['_templates']
source_suffix = ['.rst', '.md']
master_doc = 'index'
language = None
exclude_patterns = []
pygments_style = 'sphinx'

# -- Options for HTML output -------------------------------------------------

html_theme = 'alabaster'
html_static_path = []
htmlhelp_basename = 'm2formerdoc'

# -- Options for manual page output ------------------------------------------

man_pages = [(master_doc, 'm2former', 'm2former Documentation', [author], 1)]
