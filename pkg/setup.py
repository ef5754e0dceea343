from setuptools import setup

setup(
    name='StructLearn-SSL',
    version='1.0.0',
    description='Structured sparsity learning for CNN/MLP weights with compaction and GEMM benchmarks.',
    packages=['structlearn.sparsity'],
    license='MIT',
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.7',
        'PyYAML>=5.4',
        'pendulum==2.*',
        'requests>=2.20.0',
    ],
    extras_require={
        "plot": ['matplotlib>=3.3']
    },
    entry_points={
        'console_scripts': ['structlearn=structlearn.sparsity.cli:main'],
    },
    long_description=open('README.md').read()
)
