# Numerical services package
