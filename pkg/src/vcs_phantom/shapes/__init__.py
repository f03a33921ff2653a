# shapes package
