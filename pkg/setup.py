from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="rpe2d",
    version="0.1.0",
    description="Randomized 2-D positional encodings for diffusion transformers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=["sources"],
    py_modules=["cli"],
    include_package_data=True,
    install_requires=[
        "torch>=2.4.1",
        "numpy>=1.24.4",
        "scipy>=1.9.3",
        "pydantic>=2.10.6",
        "pillow",
        "colorama>=0.4.6",
        "termcolor>=2.4.0",
        "tqdm>4"
    ],
    entry_points={
        "console_scripts": [
            "rpe2d=cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
)
