from setuptools import setup

setup(name='tinyloc',
      description='TinyML indoor localisation from RSSI sequences',
      long_description='tinyloc trains compact sequence models (Mamba and MDCSA emission networks with a CRF head) '
                       'that locate a person room by room from received signal strength, then shrinks them with '
                       'post-training quantization and knowledge distillation so they fit 64 KB or 32 KB budgets. '
                       'It can be imported as a package or run from the command line.',
      long_description_content_type='text/markdown',
      license='MIT License',
      version='0.1a1',
      # See https://pypi.python.org/pypi?%3Aaction=list_classifiers
      classifiers=[
            'Development Status :: 3 - Alpha',
            'Intended Audience :: Science/Research',
            'License :: OSI Approved :: MIT License',
            'Programming Language :: Python :: 3 :: Only',
            'Programming Language :: Python :: 3.8',
            'Programming Language :: Python :: 3.9',
            'Programming Language :: Python :: 3.10',
            'Programming Language :: Python :: 3.11'
      ],
      keywords='indoor localisation tinyml rssi quantization distillation',
      python_requires='>=3.8',
      install_requires=[
            'torch>=1.13',
            'numpy',
            'pandas>=1.5',
            'scikit-learn>=1.1'
            ],
      extras_require={  # requirements for development
          'dev': ['pytest', 'interrogate']
      },
      entry_points={
            'console_scripts': ['tinyloc=tinyloc.cli:main']
      },
      packages=['tinyloc']
      )
