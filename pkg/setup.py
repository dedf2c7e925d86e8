import re

from setuptools import find_packages, setup


def get_version(filename):
    with open(filename) as fh:
        metadata = dict(re.findall("__([a-z]+)__ = '([^']+)'", fh.read()))
        return metadata['version']


setup(
    name='Minimon',
    version=get_version('minimon/__init__.py'),
    license='Apache License, Version 2.0',
    description=(
        'Desk-scale monitoring pipeline: document ingestion, stream bus, '
        'time-series store, archive, pub/sub proxy and alerting'),
    long_description=open('README.rst').read(),
    packages=find_packages(exclude=['tests', 'tests.*']),
    zip_safe=False,
    include_package_data=True,
    package_data={'minimon': ['ext.conf']},
    python_requires='>= 3.7',
    install_requires=[
        'setuptools',
        'Mopidy >= 3.0',
        'Pykka >= 2.0',
        'prometheus_client >= 0.12',
        'requests >= 2.20',
        'tornado >= 6.0',
    ],
    extras_require={
        'test': [
            'mock',
            'pytest',
            'pytest-cov',
            'pytest-mock',
        ],
    },
    entry_points={
        'console_scripts': [
            'minimon = minimon.commands:main',
        ],
    },
    classifiers=[
        'Environment :: No Input/Output (Daemon)',
        'Intended Audience :: System Administrators',
        'License :: OSI Approved :: Apache Software License',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Topic :: System :: Monitoring',
    ],
)
