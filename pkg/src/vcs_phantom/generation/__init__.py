# generation package
