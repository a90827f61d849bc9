from setuptools import setup, find_packages

with open("README.md", "r") as cd:
  long_description = cd.read()

setup(
      name='detworam',
      version='0.1.0',
      license='MIT',
      description='Deterministic write-only ORAM containers, randomized baselines and obliviousness checks',
      long_description=long_description,
      long_description_content_type="text/markdown",
      keywords=['ORAM', 'write-only ORAM', 'plausible deniability', 'storage', 'encryption'],
      packages = find_packages(),
      entry_points = {
        'console_scripts': [
          'detworam = detworam.cli:main'
        ]
      },
      install_requires=[
        'pandas',
        'matplotlib',
        'seaborn',
        'numpy',
        'scipy',
        'pycryptodome',
        'Joblib'
        ],
      extras_require={
        'test': ['pytest'],
      },
      classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Developers',
        'Topic :: Security :: Cryptography',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3.7',
        'Programming Language :: Python :: 3.8',
      ],
      )
