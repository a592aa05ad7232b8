from setuptools import setup, find_packages

setup(
    name='motiontools',
    version='0.1.0',
    packages=find_packages(exclude=['tests', 'examples']),
    install_requires=['numpy','pandas','matplotlib','rich','scipy'],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['motiontools=motiontools.cli:main']},
    author='Brecken Runquist',
    description='Motion-transformer image animation tools: motion estimation, dense motion, generation and evaluation.',
    license='Custom Academic Use License',
    python_requires='>=3.8'
)
