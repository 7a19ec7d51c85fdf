# import notreal
# from fake import thing
x = 1
