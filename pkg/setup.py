from setuptools import setup, find_packages

setup(
    name = 'DePT',
    description = 'Delayed propagation transformer for traffic signal control on a grid simulator',
    version = '0.1',
    license = 'GPL-3.0',
    packages = find_packages(exclude=['test']),
    py_modules = ['dept_tool'],
    zip_safe = False,
    python_requires = '>=3.7',
    install_requires = [
        'numpy>=1.20'
    ]
)
