from setuptools import setup, find_packages

setup(
    name="parallel-outcomes",
    version="1.0.0",
    packages=find_packages(exclude=["tests"]),
    install_requires=[
        "numpy>=1.24",
        "pandas>=2.0",
        "scipy>=1.10",
        "scikit-learn>=1.3",
        "python-dotenv>=1.0",
        "PyYAML>=6.0",
    ],
    entry_points={
        "console_scripts": ["parallel-outcomes=estimators.cli.commands:main"],
    },
    python_requires=">=3.9",
)
