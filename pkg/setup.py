import pathlib

from setuptools import setup, find_packages

here = pathlib.Path(__file__).parent.resolve()

long_description = (here / 'README.md').read_text(encoding='utf-8')

setup(
    name='pps_vae',
    version='0.1.0',
    description='Variational autoencoder whose latent is a partial pixel specification of the image, decoded with a '
                'convolutional conditional neural process',
    long_description=long_description,
    long_description_content_type='text/markdown',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Natural Language :: English',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Scientific/Engineering :: Image Processing',
    ],
    keywords='vae,neural process,convcnp,gumbel-softmax,image modelling',
    package_dir={'': 'src'},
    packages=find_packages(where='src'),
    python_requires='>=3.9, <4',
    install_requires=['torch>=2.1', 'numpy', 'matplotlib', 'scipy>=1.7', 'scikit-learn', 'tqdm'],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': [
            'pps_vae=pps_vae.command_line:command_line_main'
        ]
    },
)
