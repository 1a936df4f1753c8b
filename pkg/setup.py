from setuptools import setup
from m2former import __version__

setup(
    name='m2former',
    version=__version__,
    packages=['m2former'],
    py_modules=['config', 'run'],
    install_requires=['numpy', 'pandas', 'attrs', 'ruamel.yaml', 'atomicwrites', 'editdistance'],
    extras_require={
        'dev': [],
        'lint': ['black'],
        'test': ['pytest', 'pytest-cov', 'pytest-helpers-namespace'],
        'docs': ['sphinx', 'sphinx-autodoc-typehints', 'm2r'],
    },
    scripts=['scripts/manifest-to-csv.py'],
    entry_points={'console_scripts': ['m2former = run:main']},
)
